"""Adversarial training objectives.

The discriminator is a per-pixel (C+1)-way classifier: channels 0..C-1
are the real semantic classes, the last channel marks fake pixels.  The
generator minimizes the class-weighted negative log-likelihood of the
true class at every pixel of its fakes; the discriminator adds the fake
channel's log-likelihood on generated pixels, plus a mix-consistency
regularizer tied to the label layout.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .labels import ValidationError

LABELMIX_WEIGHT = 5.0


@dataclass(frozen=True)
class LabelMixMask:
    """Binary mix mask, constant within every class region of its map."""
    mask: np.ndarray  # [1, 1, H, W]
    seed: int


def weighted_pixel_nll(logits, onehot, alpha):
    """-sum_c alpha_c sum_ij onehot_ijc * logsoftmax(logits)_ijc, batch-averaged.

    logits may carry more channels than onehot (e.g. a trailing fake
    channel); the extra channels get zero weight.
    """
    n, c_logits = logits.data.shape[0], logits.data.shape[1]
    onehot = np.asarray(onehot, dtype=np.float64)
    c = onehot.shape[1]
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.shape != (c,):
        raise ValidationError(f"expected {c} class weights, got shape {alpha.shape}")
    if c > c_logits:
        raise ValidationError(
            f"one-hot channels {c} exceed logit channels {c_logits}")
    wmap = np.zeros((onehot.shape[0],) + (c_logits,) + onehot.shape[2:])
    wmap[:, :c] = onehot * alpha[None, :, None, None]
    ls = ad.log_softmax_channels(logits)
    return ad.scale(ad.total_sum(ad.mul(ls, Tensor(wmap))), -1.0 / n)


def generator_loss(d_logits_fake, onehot, alpha):
    """Class-weighted cross-entropy of the discriminator on generated pixels."""
    return weighted_pixel_nll(d_logits_fake, onehot, alpha)


def discriminator_loss(d_real, d_fake, onehot, alpha):
    """Real pixels: weighted C-class term; fake pixels: fake-channel term."""
    n, c_out = d_fake.data.shape[0], d_fake.data.shape[1]
    real_term = weighted_pixel_nll(d_real, onehot, alpha)
    fake_ls = ad.slice_channels(ad.log_softmax_channels(d_fake), c_out - 1, c_out)
    fake_term = ad.scale(ad.total_sum(fake_ls), -1.0 / n)
    return ad.add(real_term, fake_term)


def labelmix(x_real, x_fake, mask):
    """Entrywise mask*x_real + (1-mask)*x_fake, mask broadcast over channels."""
    m = np.asarray(mask, dtype=np.float64)
    if x_real.data.shape != x_fake.data.shape:
        raise ValidationError(
            f"mix operands differ: {x_real.data.shape} vs {x_fake.data.shape}")
    if m.shape[-2:] != x_real.data.shape[-2:]:
        raise ValidationError(
            f"mix mask {m.shape} does not cover image {x_real.data.shape}")
    return ad.add(ad.mul(x_real, Tensor(m)), ad.mul(x_fake, Tensor(1.0 - m)))


def sample_labelmix_mask(smap, seed):
    """Assign each class present in the map an independent fair bit."""
    rng = np.random.RandomState(seed & 0x7FFFFFFF)
    classes = np.unique(smap.labels)
    bits = {int(c): int(rng.randint(0, 2)) for c in sorted(classes)}
    lut = np.zeros(int(classes.max()) + 1)
    for c, bit in bits.items():
        lut[c] = float(bit)
    return LabelMixMask(mask=lut[smap.labels][None, None], seed=seed)


def labelmix_consistency(d_forward, x_real, x_fake, mask, d_real=None, d_fake=None):
    """Squared distance between D(mix(x, x')) and mix(D(x), D(x')) on raw logits.

    Averaged over pixels and channels.  Precomputed logits for the
    unmixed images may be passed to avoid repeated forwards.
    """
    mixed = labelmix(x_real, x_fake, mask)
    d_mixed = d_forward(mixed)
    if d_real is None:
        d_real = d_forward(x_real)
    if d_fake is None:
        d_fake = d_forward(x_fake)
    mixed_logits = labelmix(d_real, d_fake, mask)
    diff = ad.sub(d_mixed, mixed_logits)
    return ad.total_mean(ad.mul(diff, diff))
