"""Training orchestration: optimizer, pretraining, continual steps, verification.

One iteration is one discriminator step (adversarial + mix-consistency
terms) followed by one generator step.  A continual step trains only the
new domain's delta plus a throwaway discriminator; the resulting
checkpoint appends one section and leaves every earlier byte in place.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import losses
from .autodiff import Tensor
from .checkpoint import Checkpoint, build_base_checkpoint, load_generator, pack_params
from .labels import ValidationError, class_frequencies, one_hot
from .network import Discriminator, Generator

ADAM_BETA1 = 0.0
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class DomainTask:
    domain: str
    step: int
    iterations: int
    batch_size: int = 2
    lr: float = 2e-4
    seed: int = 0
    subset_size: int | None = None

    def apply_subset(self, dataset):
        if self.subset_size is None:
            return dataset
        if self.subset_size > len(dataset):
            raise ValidationError(
                f"subset_size {self.subset_size} exceeds dataset size {len(dataset)}")
        return dataset[:self.subset_size]


class Adam:
    """Bias-corrected adaptive-moment update in fixed name order."""

    def __init__(self, params, lr, beta1=ADAM_BETA1, beta2=ADAM_BETA2, eps=ADAM_EPS):
        self.params = sorted(params, key=lambda p: p.name)
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ValidationError(f"duplicate parameter names in optimizer: {names}")
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self):
        for p in self.params:
            p.tensor.grad = None

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.tensor.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient in parameter {p.name!r}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _batch_arrays(scenes, n_classes):
    images = np.concatenate([s.image for s in scenes], axis=0)
    onehot = np.concatenate([one_hot(s.mask, n_classes) for s in scenes], axis=0)
    return images, onehot


def _lm_seed(seed, iteration, k):
    return (seed * 1000003 + iteration * 9176 + k * 31 + 7) & 0x7FFFFFFF


def run_gan_loop(gen, disc, dataset, task, log_path=None, iter_hook=None):
    """Alternating D/G training of ``gen``'s trainable partition.

    ``iter_hook(iteration, gen)``, when given, runs after each iteration
    (snapshots, mid-run metrics); it must not mutate the model.
    """
    if not dataset:
        raise ValidationError("training dataset is empty")
    dataset = task.apply_subset(dataset)
    step = task.step
    n_classes = gen.registry.c_total(step)
    alpha = class_frequencies([s.mask for s in dataset], n_classes)
    rng = np.random.RandomState(task.seed)
    adam_g = Adam(gen.trainable_parameters(), lr=task.lr)
    adam_d = Adam(disc.parameters(), lr=task.lr)
    history = []
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for it in range(task.iterations):
            idx = rng.randint(0, len(dataset), size=task.batch_size)
            batch = [dataset[i] for i in idx]
            smaps = [s.mask for s in batch]
            real_arr, onehot = _batch_arrays(batch, n_classes)

            # discriminator step
            z = rng.standard_normal((task.batch_size, gen.config.z_dim))
            with ad.no_grad():
                fake_arr = gen.forward(z, smaps, task.domain).data
            real, fake = Tensor(real_arr), Tensor(fake_arr)
            d_real = disc.forward(real)
            d_fake = disc.forward(fake)
            loss_d = losses.discriminator_loss(d_real, d_fake, onehot, alpha)
            lm = np.concatenate(
                [losses.sample_labelmix_mask(m, _lm_seed(task.seed, it, k)).mask
                 for k, m in enumerate(smaps)], axis=0)
            loss_lm = losses.labelmix_consistency(
                disc.forward, real, fake, lm, d_real=d_real, d_fake=d_fake)
            total_d = ad.add(loss_d, ad.scale(loss_lm, losses.LABELMIX_WEIGHT))
            adam_d.zero_grad()
            total_d.backward()
            adam_d.step()

            # generator step
            z = rng.standard_normal((task.batch_size, gen.config.z_dim))
            fake_g = gen.forward(z, smaps, task.domain)
            with ad.params_detached(disc.parameters()):
                logits = disc.forward(fake_g)
            loss_g = losses.generator_loss(logits, onehot, alpha)
            adam_g.zero_grad()
            loss_g.backward()
            adam_g.step()

            record = {"iter": it, "loss_g": loss_g.item(), "loss_d": loss_d.item(),
                      "loss_lm": loss_lm.item()}
            history.append(record)
            if log_fh:
                log_fh.write(json.dumps(record) + "\n")
            if iter_hook is not None:
                iter_hook(it, gen)
    finally:
        if log_fh:
            log_fh.close()
    return history


def pretrain(config, registry, dataset, task, log_path=None):
    """Train the first domain from scratch and persist it as the base model."""
    if task.step != 0:
        raise ValidationError(f"pretraining is step 0, got step {task.step}")
    if registry.domain_of_step(0) != task.domain:
        raise ValidationError(
            f"step 0 belongs to domain {registry.domain_of_step(0)!r}, "
            f"not {task.domain!r}")
    gen = Generator(config, registry, seed=task.seed)
    disc = Discriminator(registry.c_total(0) + 1, config, seed=task.seed + 1)
    history = run_gan_loop(gen, disc, dataset, task, log_path=log_path)
    return build_base_checkpoint(gen), history


def continue_domain(ckpt, task, dataset, log_path=None):
    """One continual step: extend, train only the delta, splice it in."""
    if task.step != ckpt.next_step:
        raise ValidationError(
            f"checkpoint expects step {ckpt.next_step} next, task says {task.step}")
    registry = ckpt.registry()
    if task.step >= len(registry.steps):
        raise ValidationError(f"registry stream has no step {task.step}")
    if registry.domain_of_step(task.step) != task.domain:
        raise ValidationError(
            f"step {task.step} belongs to domain "
            f"{registry.domain_of_step(task.step)!r}, not {task.domain!r}")
    gen = load_generator(ckpt)
    gen.extend_step(task.step, task.domain)
    disc = Discriminator(registry.c_total(task.step) + 1, gen.config, seed=task.seed + 1)
    history = run_gan_loop(gen, disc, dataset, task, log_path=log_path)
    delta = [p for p in gen.parameters() if p.domain_tag == task.domain]
    return ckpt.with_delta(task.domain, delta), history


# ---------------------------------------------------------------------------
# zero-forgetting verification
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ProbeResult:
    domain: str
    max_abs_diff: float


@dataclass(frozen=True)
class VerifyReport:
    probes: tuple
    digests: dict  # section -> (before_hex, after_hex)
    passed: bool

    def to_json(self):
        return json.dumps({
            "passed": self.passed,
            "probes": [{"domain": p.domain, "max_abs_diff": p.max_abs_diff}
                       for p in self.probes],
            "sections": {name: {"before": b, "after": a, "match": b == a}
                         for name, (b, a) in self.digests.items()},
        }, indent=2, sort_keys=True)


def verify_zero_forgetting(ckpt_before, ckpt_after, probes):
    """Bit-exact regression check over earlier domains.

    Every probe (z, map, domain) must generate identical images from the
    two checkpoints, and every section of the earlier checkpoint must
    reappear with an identical digest.
    """
    gen_before = load_generator(ckpt_before)
    gen_after = load_generator(ckpt_after)
    built = set(ckpt_before.registry().domains[:ckpt_before.next_step])
    results = []
    for z, smap, domain in probes:
        if domain not in built:
            raise ValidationError(
                f"probe domain {domain!r} is not covered by the earlier checkpoint")
        img_a = gen_before.generate(z, smap, domain)
        img_b = gen_after.generate(z, smap, domain)
        results.append(ProbeResult(domain=domain,
                                   max_abs_diff=float(np.max(np.abs(img_a - img_b)))))
    before_digests = ckpt_before.digests()
    after_digests = ckpt_after.digests()
    digests = {}
    digests_ok = True
    for name, before in before_digests.items():
        after = after_digests.get(name)
        digests[name] = (f"{before:016x}", f"{after:016x}" if after is not None else "missing")
        digests_ok &= after == before
    passed = digests_ok and all(p.max_abs_diff == 0.0 for p in results)
    return VerifyReport(probes=tuple(results), digests=digests, passed=passed)


def make_probes(domains, n, seed, spec_lookup, z_dim, image_hw):
    """Deterministic (z, map, domain) probes cycling over the given domains."""
    from .scenes import generate_scene
    rng = np.random.RandomState(seed)
    probes = []
    for i in range(n):
        domain = domains[i % len(domains)]
        spec = spec_lookup(domain)
        if (spec.height, spec.width) != image_hw:
            raise ValidationError(
                f"scene spec for {domain!r} renders {spec.height}x{spec.width}, "
                f"model wants {image_hw[0]}x{image_hw[1]}")
        scene = generate_scene(spec, seed * 100003 + i)
        probes.append((rng.standard_normal(z_dim), scene.mask, domain))
    return probes
