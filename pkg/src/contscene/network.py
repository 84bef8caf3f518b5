"""Generator and discriminator for continual semantic scene synthesis.

The generator is a stack of residual blocks, each conditioning its
features on the semantic layout twice (norm -> spatial scale/shift) and
passing them through two 3x3 convolutions.  Extending to a new domain
adds only: a zero-initialized label conv per conditioning block for the
step's new classes, a fresh per-domain norm affine (copied from the
previous domain) and per-conv restyling triples (alpha, beta, bias
delta) over the frozen base kernels.  Base weights are never written
again, which makes earlier domains bit-stable by construction.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import BASE_TAG, Parameter, Tensor
from .labels import ValidationError, one_hot


@dataclass(frozen=True)
class ModelConfig:
    n_blocks: int = 3
    channels: tuple = (64, 32, 16)
    hidden: int = 32
    z_dim: int = 8
    base_h: int = 8
    base_w: int = 12
    d_channels: tuple = (16, 32, 64)
    eps: float = 1e-5
    eps_s: float = 1e-5
    leak: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "d_channels", tuple(int(c) for c in self.d_channels))
        if len(self.channels) != self.n_blocks:
            raise ValidationError(
                f"channels {self.channels} must list one width per block "
                f"(n_blocks={self.n_blocks})")
        if len(self.d_channels) != 3:
            raise ValidationError(f"d_channels must have 3 entries, got {self.d_channels}")

    @property
    def image_h(self):
        return self.base_h * 2 ** (self.n_blocks - 1)

    @property
    def image_w(self):
        return self.base_w * 2 ** (self.n_blocks - 1)

    def to_dict(self):
        return {
            "n_blocks": self.n_blocks, "channels": list(self.channels),
            "hidden": self.hidden, "z_dim": self.z_dim,
            "base_h": self.base_h, "base_w": self.base_w,
            "d_channels": list(self.d_channels),
            "eps": self.eps, "eps_s": self.eps_s, "leak": self.leak,
        }

    @classmethod
    def from_dict(cls, doc):
        known = {"n_blocks", "channels", "hidden", "z_dim", "base_h", "base_w",
                 "d_channels", "eps", "eps_s", "leak"}
        unknown = set(doc) - known
        if unknown:
            raise ValidationError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**doc)


def _he(rng, shape):
    fan_in = int(np.prod(shape[1:]))
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


def weight_stats(w, eps_s=1e-5):
    """Per-kernel mean and population std of a [Cout,Cin,K,K] weight.

    The std is floored at eps_s so constant kernels stay invertible.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 4:
        raise ValidationError(f"weight_stats needs a 4-d weight, got shape {w.shape}")
    m = w.mean(axis=(2, 3))
    s = np.maximum(w.std(axis=(2, 3)), eps_s)
    return m, s


class ModulatedConv:
    """3x3 conv whose frozen kernels are restyled per domain.

    Effective weights follow
        W_eff = alpha * (W - M) / S + beta,   b_eff = b + b_delta,
    with (M, S) the per-kernel mean/std of the frozen W.  The identity
    setting (alpha=S, beta=M, b_delta=0) reproduces W and b exactly: the
    expression is evaluated in the algebraically equal form
        W_eff = (alpha - S) * Wn + (beta - M) + W,   Wn = (W - M) / S,
    whose deviation terms vanish bit-exactly at the identity.
    """

    def __init__(self, name, cin, cout, rng, eps_s=1e-5, kernel=3):
        self.name = name
        self.eps_s = eps_s
        self.pad = kernel // 2
        self.w = Parameter(name + ".w", _he(rng, (cout, cin, kernel, kernel)))
        self.b = Parameter(name + ".b", np.zeros(cout))
        self.mstat = None
        self.sstat = None
        self._wn = None
        self._m4 = None
        self._s4 = None
        self.mods = {}

    def freeze_base(self):
        self.w.freeze()
        self.b.freeze()
        self.mstat, self.sstat = weight_stats(self.w.data, self.eps_s)
        self._wn = (self.w.data - self.mstat[:, :, None, None]) / self.sstat[:, :, None, None]
        self._m4 = Tensor(self.mstat[:, :, None, None])
        self._s4 = Tensor(self.sstat[:, :, None, None])

    def add_domain(self, domain):
        if self.mstat is None:
            raise ValidationError(f"{self.name}: freeze the base weights before extending")
        self.mods[domain] = (
            Parameter(self.name + ".mod.alpha", self.sstat.copy(), domain_tag=domain),
            Parameter(self.name + ".mod.beta", self.mstat.copy(), domain_tag=domain),
            Parameter(self.name + ".mod.bdelta", np.zeros(self.b.data.shape), domain_tag=domain),
        )

    def modulated_weights(self, domain):
        """Effective (W_eff, b_eff) tensors for a registered domain."""
        if domain not in self.mods:
            raise LookupError(f"{self.name}: no restyle parameters for domain {domain!r}")
        alpha, beta, bdelta = self.mods[domain]
        cout, cin = self.mstat.shape
        a4 = ad.reshape(alpha.tensor, (cout, cin, 1, 1))
        b4 = ad.reshape(beta.tensor, (cout, cin, 1, 1))
        dev = ad.add(ad.mul(ad.sub(a4, self._s4), Tensor(self._wn)), ad.sub(b4, self._m4))
        w_eff = ad.add(dev, self.w.tensor)
        b_eff = ad.add(self.b.tensor, bdelta.tensor)
        return w_eff, b_eff

    def forward(self, x, domain):
        if domain in self.mods:
            w_eff, b_eff = self.modulated_weights(domain)
            return ad.conv2d(x, w_eff, b_eff, self.pad)
        return ad.conv2d(x, self.w.tensor, self.b.tensor, self.pad)

    def parameters(self):
        yield self.w
        yield self.b
        for triple in self.mods.values():
            yield from triple


@dataclass
class LayoutCond:
    """Semantic conditioning at one feature resolution.

    base_in carries the first-step one-hot channels concatenated with the
    replicated noise.  For continual steps every branch is confined to
    its own class areas by a binary mask; branch masks partition the
    image, so contributions can never leak across label groups.
    """
    base_in: Tensor
    base_mask: Tensor | None
    el_inputs: list  # [(step, onehot, mask)]


class LayoutNormBlock:
    """Layout-conditioned normalization with an extendable label input."""

    def __init__(self, name, feat_ch, hidden, base_classes, z_dim, base_domain, rng,
                 eps=1e-5):
        self.name = name
        self.feat_ch = feat_ch
        self.hidden = hidden
        self.eps = eps
        self.first_w = Parameter(name + ".first.w", _he(rng, (hidden, base_classes + z_dim, 3, 3)))
        self.first_b = Parameter(name + ".first.b", np.zeros(hidden))
        self.scale_w = Parameter(name + ".scale.w", _he(rng, (feat_ch, hidden, 3, 3)))
        self.scale_b = Parameter(name + ".scale.b", np.zeros(feat_ch))
        self.shift_w = Parameter(name + ".shift.w", _he(rng, (feat_ch, hidden, 3, 3)))
        self.shift_b = Parameter(name + ".shift.b", np.zeros(feat_ch))
        self.affine = {base_domain: (
            Parameter(name + ".aff.gamma", np.ones(feat_ch)),
            Parameter(name + ".aff.beta", np.zeros(feat_ch)),
        )}
        self.el = {}

    def add_step(self, step, c_new, domain):
        self.el[step] = (
            Parameter(f"{self.name}.el{step}.w", np.zeros((self.hidden, c_new, 3, 3)),
                      domain_tag=domain),
            Parameter(f"{self.name}.el{step}.b", np.zeros(self.hidden), domain_tag=domain),
        )

    def add_affine(self, domain, prev_domain):
        gamma, beta = self.affine[prev_domain]
        self.affine[domain] = (
            Parameter(self.name + ".aff.gamma", gamma.data.copy(), domain_tag=domain),
            Parameter(self.name + ".aff.beta", beta.data.copy(), domain_tag=domain),
        )

    def forward(self, x, cond, domain, step):
        if domain not in self.affine:
            raise LookupError(f"{self.name}: no norm affine for domain {domain!r}")
        gamma, beta = self.affine[domain]
        normed = ad.instance_norm(x, gamma.tensor, beta.tensor, self.eps)

        h = ad.conv2d(cond.base_in, self.first_w.tensor, self.first_b.tensor, 1)
        if cond.base_mask is not None:
            h = ad.mul(h, cond.base_mask)
        for s, onehot_s, mask_s in cond.el_inputs:
            if s not in self.el:
                raise ValidationError(
                    f"{self.name}: step {s} has no extended-label conv (step={step})")
            el_w, el_b = self.el[s]
            h = ad.add(h, ad.mul(ad.conv2d(onehot_s, el_w.tensor, el_b.tensor, 1), mask_s))
        h = ad.relu(h)
        scl = ad.conv2d(h, self.scale_w.tensor, self.scale_b.tensor, 1)
        sft = ad.conv2d(h, self.shift_w.tensor, self.shift_b.tensor, 1)
        return ad.add(ad.mul(normed, ad.add(scl, Tensor(1.0))), sft)

    def parameters(self):
        yield from (self.first_w, self.first_b, self.scale_w, self.scale_b,
                    self.shift_w, self.shift_b)
        for pair in self.affine.values():
            yield from pair
        for pair in self.el.values():
            yield from pair


class ResBlock:
    def __init__(self, name, fin, fout, cfg, base_classes, base_domain, rng):
        fmid = min(fin, fout)
        self.leak = cfg.leak
        self.cond0 = LayoutNormBlock(name + ".cond0", fin, cfg.hidden, base_classes,
                                     cfg.z_dim, base_domain, rng, eps=cfg.eps)
        self.conv0 = ModulatedConv(name + ".conv0", fin, fmid, rng, eps_s=cfg.eps_s)
        self.cond1 = LayoutNormBlock(name + ".cond1", fmid, cfg.hidden, base_classes,
                                     cfg.z_dim, base_domain, rng, eps=cfg.eps)
        self.conv1 = ModulatedConv(name + ".conv1", fmid, fout, rng, eps_s=cfg.eps_s)
        if fin != fout:
            self.skip_w = Parameter(name + ".skip.w", _he(rng, (fout, fin, 1, 1)))
            self.skip_b = Parameter(name + ".skip.b", np.zeros(fout))
        else:
            self.skip_w = self.skip_b = None

    def forward(self, x, cond, domain, step):
        dx = self.cond0.forward(x, cond, domain, step)
        dx = self.conv0.forward(ad.leaky_relu(dx, self.leak), domain)
        dx = self.cond1.forward(dx, cond, domain, step)
        dx = self.conv1.forward(ad.leaky_relu(dx, self.leak), domain)
        if self.skip_w is None:
            return ad.add(x, dx)
        return ad.add(ad.conv2d(x, self.skip_w.tensor, self.skip_b.tensor, 0), dx)

    def parameters(self):
        yield from self.cond0.parameters()
        yield from self.conv0.parameters()
        yield from self.cond1.parameters()
        yield from self.conv1.parameters()
        if self.skip_w is not None:
            yield self.skip_w
            yield self.skip_b


class Generator:
    """Layout-to-image generator with per-domain parameter deltas."""

    def __init__(self, config, registry, seed=0):
        self.config = config
        self.registry = registry
        rng = np.random.RandomState(seed)
        base_domain = registry.domains[0]
        c0 = registry.c_total(0)
        chans = config.channels
        self.const = Parameter(
            "g.const", rng.standard_normal((1, chans[0], config.base_h, config.base_w)))
        self.blocks = []
        for i in range(config.n_blocks):
            fin = chans[0] if i == 0 else chans[i - 1]
            self.blocks.append(ResBlock(f"g.b{i}", fin, chans[i], config, c0,
                                        base_domain, rng))
        self.out_w = Parameter("g.out.w", _he(rng, (3, chans[-1], 3, 3)))
        self.out_b = Parameter("g.out.b", np.zeros(3))
        self.step_built = 0
        self.base_frozen = False

    # -- parameter bookkeeping ------------------------------------------------

    def parameters(self):
        params = [self.const]
        for b in self.blocks:
            params.extend(b.parameters())
        params.extend([self.out_w, self.out_b])
        return params

    def domain_parameters(self, domain_tag):
        return [p for p in self.parameters() if p.domain_tag == domain_tag]

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.trainable]

    # -- lifecycle -------------------------------------------------------------

    def freeze_base(self):
        for p in self.domain_parameters(BASE_TAG):
            p.freeze()
        for b in self.blocks:
            b.conv0.freeze_base()
            b.conv1.freeze_base()
        self.base_frozen = True

    def extend_step(self, step, domain):
        """Add the trainable delta for one continual step.

        New label convs start at zero, norm affines copy the previous
        domain's values and restyle triples start at the exact identity,
        so generation for maps without new classes initially matches the
        previous model bit for bit.
        """
        if step != self.step_built + 1:
            raise ValidationError(
                f"cannot extend to step {step}: model is built through step {self.step_built}")
        if step >= len(self.registry.steps):
            raise ValidationError(f"registry has no step {step}")
        info = self.registry.steps[step]
        if info.domain != domain:
            raise ValidationError(
                f"step {step} belongs to domain {info.domain!r}, not {domain!r}")
        if not self.base_frozen:
            self.freeze_base()
        prev_domain = self.registry.domains[step - 1]
        for p in self.parameters():
            if p.trainable:
                p.freeze()
        for b in self.blocks:
            for sp in (b.cond0, b.cond1):
                sp.add_step(step, info.c_new, domain)
                sp.add_affine(domain, prev_domain)
            b.conv0.add_domain(domain)
            b.conv1.add_domain(domain)
        self.step_built = step
        return self

    # -- forward ---------------------------------------------------------------

    def _block_sizes(self):
        return [(self.config.base_h * 2 ** i, self.config.base_w * 2 ** i)
                for i in range(self.config.n_blocks)]

    def _build_conds(self, zs, smaps, step):
        cfg = self.config
        n = zs.shape[0]
        c0 = self.registry.c_total(0)
        c = self.registry.c_total(step)
        for m in smaps:
            if (m.height, m.width) != (cfg.image_h, cfg.image_w):
                raise ValidationError(
                    f"map size {(m.height, m.width)} does not match the model's "
                    f"{(cfg.image_h, cfg.image_w)}")
        full = np.concatenate([one_hot(m, c) for m in smaps], axis=0)
        conds = {}
        for h, w in self._block_sizes():
            f = cfg.image_h // h
            oh = full[:, :, ::f, ::f]
            noise = np.broadcast_to(zs[:, :, None, None], (n, cfg.z_dim, h, w))
            base_in = Tensor(np.ascontiguousarray(
                np.concatenate([oh[:, :c0], noise], axis=1)))
            if step == 0:
                conds[(h, w)] = LayoutCond(base_in, None, [])
                continue
            el_inputs = []
            base_mask = np.ones((n, 1, h, w))
            for s in range(1, step + 1):
                lo, hi = self.registry.new_range(s)
                mask_s = oh[:, lo:hi].sum(axis=1, keepdims=True)
                base_mask = base_mask - mask_s
                el_inputs.append((s, Tensor(np.ascontiguousarray(oh[:, lo:hi])),
                                  Tensor(mask_s)))
            conds[(h, w)] = LayoutCond(base_in, Tensor(base_mask), el_inputs)
        return conds

    def forward(self, zs, smaps, domain):
        """Batched forward pass; zs is [N, z_dim], smaps a list of N maps."""
        step = self.registry.step_of_domain(domain)
        if step > self.step_built:
            raise LookupError(
                f"domain {domain!r} is step {step}, model is built through "
                f"step {self.step_built}")
        zs = np.asarray(zs, dtype=np.float64)
        if zs.ndim != 2 or zs.shape[1] != self.config.z_dim:
            raise ValidationError(f"noise must be [N, {self.config.z_dim}], got {zs.shape}")
        if not np.all(np.isfinite(zs)):
            raise ValidationError("noise vector contains non-finite values")
        conds = self._build_conds(zs, smaps, step)
        sizes = self._block_sizes()
        x = ad.tile_batch(self.const.tensor, zs.shape[0])
        for i, block in enumerate(self.blocks):
            if i:
                x = ad.upsample_nearest(x, 2)
            x = block.forward(x, conds[sizes[i]], domain, step)
        x = ad.conv2d(ad.leaky_relu(x, self.config.leak), self.out_w.tensor,
                      self.out_b.tensor, 1)
        return ad.tanh(x)

    def generate(self, z, smap, domain):
        """Single image [1,3,H,W] as a plain array, without recording a graph."""
        with ad.no_grad():
            out = self.forward(np.asarray(z, dtype=np.float64)[None], [smap], domain)
        return out.data


class Discriminator:
    """Encoder-decoder with skip connections and a per-pixel class head.

    Output spatial size equals input size; input dims must be divisible
    by 4 (two pooling levels).
    """

    def __init__(self, n_out, config, seed=0, prefix="d"):
        rng = np.random.RandomState(seed)
        nf0, nf1, nf2 = config.d_channels
        self.leak = config.leak
        self.n_out = n_out
        self.params = {}

        def conv(name, cin, cout, k=3):
            self.params[name + ".w"] = Parameter(f"{prefix}.{name}.w",
                                                 _he(rng, (cout, cin, k, k)))
            self.params[name + ".b"] = Parameter(f"{prefix}.{name}.b", np.zeros(cout))

        conv("e0", 3, nf0)
        conv("e1", nf0, nf1)
        conv("e2", nf1, nf2)
        conv("d1", nf2 + nf1, nf1)
        conv("d0", nf1 + nf0, nf0)
        # raw pixels skip straight into the 1x1 head: per-pixel color evidence
        # reaches the logits without 3x3 blurring
        conv("head", nf0 + 3, n_out, k=1)

    def _conv(self, x, name, pad=1):
        return ad.conv2d(x, self.params[name + ".w"].tensor,
                         self.params[name + ".b"].tensor, pad)

    def forward(self, x):
        h, w = x.data.shape[2], x.data.shape[3]
        if h % 4 or w % 4:
            raise ValidationError(f"input dims must be divisible by 4, got {x.data.shape}")
        a0 = ad.leaky_relu(self._conv(x, "e0"), self.leak)
        a1 = ad.leaky_relu(self._conv(ad.avg_pool2(a0), "e1"), self.leak)
        a2 = ad.leaky_relu(self._conv(ad.avg_pool2(a1), "e2"), self.leak)
        u1 = ad.leaky_relu(self._conv(ad.concat_channels(
            [ad.upsample_nearest(a2, 2), a1]), "d1"), self.leak)
        u0 = ad.leaky_relu(self._conv(ad.concat_channels(
            [ad.upsample_nearest(u1, 2), a0]), "d0"), self.leak)
        return self._conv(ad.concat_channels([u0, x]), "head", pad=0)

    def parameters(self):
        return list(self.params.values())


def init_continual(generator, step, domain):
    """Extend a frozen generator with one continual step's trainable delta."""
    return generator.extend_step(step, domain)


def continual_delta_size(config, c_new):
    """Closed-form parameter count of one continual step's delta."""
    total = 0
    chans = config.channels
    for i in range(config.n_blocks):
        fin = chans[0] if i == 0 else chans[i - 1]
        fout = chans[i]
        fmid = min(fin, fout)
        total += 2 * fmid * fin + fmid          # conv0 restyle
        total += 2 * fout * fmid + fout         # conv1 restyle
        total += 2 * (config.hidden * c_new * 9 + config.hidden)  # two label convs
        total += 2 * fin + 2 * fmid             # two norm affines
    return total
