import numpy as np
import pytest

from contscene import autodiff as ad
from contscene import losses
from contscene.labels import SemanticMap, ValidationError


def logits(arr):
    return ad.Tensor(np.asarray(arr, dtype=np.float64))


def brute_force_nll(logit_arr, onehot, alpha):
    """Direct per-pixel summation of the weighted log-likelihood."""
    n, c_out, h, w = logit_arr.shape
    total = 0.0
    for b in range(n):
        for i in range(h):
            for j in range(w):
                z = logit_arr[b, :, i, j]
                ls = z - (z.max() + np.log(np.exp(z - z.max()).sum()))
                for c in range(onehot.shape[1]):
                    total -= alpha[c] * onehot[b, c, i, j] * ls[c]
    return total / n


# ---------------------------------------------------------------------------
# generator loss
# ---------------------------------------------------------------------------

def test_generator_loss_zero_for_perfect_prediction():
    d = np.zeros((1, 3, 2, 2))
    d[0, 1] = 1000.0  # probability 1 on the true class
    onehot = np.zeros((1, 2, 2, 2))
    onehot[0, 1] = 1.0
    loss = losses.generator_loss(logits(d), onehot, np.ones(2))
    assert loss.item() == 0.0


def test_generator_loss_uniform_logits_closed_form():
    d = np.zeros((1, 3, 1, 1))
    onehot = np.zeros((1, 2, 1, 1))
    onehot[0, 0] = 1.0
    loss = losses.generator_loss(logits(d), onehot, np.ones(2))
    assert abs(loss.item() - (-np.log(1.0 / 3.0))) < 1e-12


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_generator_loss_matches_brute_force(seed):
    rng = np.random.RandomState(seed)
    d = rng.standard_normal((1, 3, 4, 4))
    labels = rng.randint(0, 2, size=(4, 4))
    onehot = np.zeros((1, 2, 4, 4))
    onehot[0, labels, np.arange(4)[:, None], np.arange(4)[None, :]] = 1.0
    alpha = rng.uniform(0.2, 2.0, 2)
    loss = losses.generator_loss(logits(d), onehot, alpha)
    assert abs(loss.item() - brute_force_nll(d, onehot, alpha)) < 1e-12


def test_generator_loss_nonnegative_property():
    rng = np.random.RandomState(3)
    for _ in range(20):
        d = rng.standard_normal((1, 4, 3, 3)) * 5
        labels = rng.randint(0, 3, size=(3, 3))
        onehot = np.zeros((1, 3, 3, 3))
        onehot[0, labels, np.arange(3)[:, None], np.arange(3)[None, :]] = 1.0
        loss = losses.generator_loss(logits(d), onehot, rng.uniform(0.1, 2, 3))
        assert loss.item() >= 0.0


# ---------------------------------------------------------------------------
# discriminator loss
# ---------------------------------------------------------------------------

def test_discriminator_loss_zero_for_perfect_split():
    c = 2
    d_real = np.zeros((1, c + 1, 2, 2))
    onehot = np.zeros((1, c, 2, 2))
    onehot[0, 0] = 1.0
    d_real[0, 0] = 1000.0
    d_fake = np.zeros((1, c + 1, 2, 2))
    d_fake[0, c] = 1000.0
    loss = losses.discriminator_loss(logits(d_real), logits(d_fake), onehot, np.ones(c))
    assert loss.item() == 0.0


def test_discriminator_loss_uniform_real_term():
    c = 2
    d_real = np.zeros((1, c + 1, 1, 1))
    d_fake = np.zeros((1, c + 1, 1, 1))
    d_fake[0, c] = 1000.0  # fake term vanishes
    onehot = np.zeros((1, c, 1, 1))
    onehot[0, 1] = 1.0
    loss = losses.discriminator_loss(logits(d_real), logits(d_fake), onehot, np.ones(c))
    assert abs(loss.item() - (-np.log(1.0 / 3.0))) < 1e-12


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_discriminator_loss_matches_brute_force(seed):
    rng = np.random.RandomState(seed)
    c = 2
    d_real = rng.standard_normal((1, c + 1, 4, 4))
    d_fake = rng.standard_normal((1, c + 1, 4, 4))
    labels = rng.randint(0, c, size=(4, 4))
    onehot = np.zeros((1, c, 4, 4))
    onehot[0, labels, np.arange(4)[:, None], np.arange(4)[None, :]] = 1.0
    alpha = rng.uniform(0.2, 2.0, c)

    expected = brute_force_nll(d_real, onehot, alpha)
    for i in range(4):
        for j in range(4):
            z = d_fake[0, :, i, j]
            ls = z - (z.max() + np.log(np.exp(z - z.max()).sum()))
            expected -= ls[c]
    loss = losses.discriminator_loss(logits(d_real), logits(d_fake), onehot, alpha)
    assert abs(loss.item() - expected) < 1e-12


# ---------------------------------------------------------------------------
# label-aligned mixing
# ---------------------------------------------------------------------------

def test_labelmix_all_ones_returns_real():
    rng = np.random.RandomState(0)
    xr, xf = rng.standard_normal((2, 1, 3, 4, 4))
    out = losses.labelmix(ad.Tensor(xr), ad.Tensor(xf), np.ones((1, 1, 4, 4)))
    assert np.array_equal(out.data, xr)


def test_labelmix_all_zeros_returns_fake():
    rng = np.random.RandomState(1)
    xr, xf = rng.standard_normal((2, 1, 3, 4, 4))
    out = losses.labelmix(ad.Tensor(xr), ad.Tensor(xf), np.zeros((1, 1, 4, 4)))
    assert np.array_equal(out.data, xf)


def test_labelmix_checkerboard():
    mask = np.indices((4, 4)).sum(axis=0) % 2
    xr = np.ones((1, 1, 4, 4))
    xf = -np.ones((1, 1, 4, 4))
    out = losses.labelmix(ad.Tensor(xr), ad.Tensor(xf), mask[None, None].astype(float))
    assert np.array_equal(out.data[0, 0], np.where(mask == 1, 1.0, -1.0))


def test_labelmix_shape_mismatch_raises():
    with pytest.raises(ValidationError):
        losses.labelmix(ad.Tensor(np.zeros((1, 3, 4, 4))),
                        ad.Tensor(np.zeros((1, 3, 2, 2))), np.zeros((1, 1, 4, 4)))


def test_labelmix_swap_identity():
    rng = np.random.RandomState(2)
    xr, xf = rng.standard_normal((2, 1, 3, 4, 4))
    mask = (rng.uniform(size=(1, 1, 4, 4)) > 0.5).astype(float)
    a = losses.labelmix(ad.Tensor(xr), ad.Tensor(xf), mask)
    b = losses.labelmix(ad.Tensor(xf), ad.Tensor(xr), mask)
    assert np.max(np.abs((a.data + b.data) - (xr + xf))) < 1e-15


# ---------------------------------------------------------------------------
# mix mask sampling
# ---------------------------------------------------------------------------

def test_mask_single_class_is_uniform():
    smap = SemanticMap(labels=np.zeros((4, 4), dtype=np.int64))
    m = losses.sample_labelmix_mask(smap, seed=5)
    assert np.all(m.mask == m.mask[0, 0, 0, 0])


def test_mask_deterministic_in_seed():
    smap = SemanticMap(labels=np.arange(16).reshape(4, 4) % 3)
    a = losses.sample_labelmix_mask(smap, seed=42)
    b = losses.sample_labelmix_mask(smap, seed=42)
    assert np.array_equal(a.mask, b.mask)
    assert a.seed == 42


def test_mask_constant_within_class_regions():
    rng = np.random.RandomState(0)
    smap = SemanticMap(labels=rng.randint(0, 4, size=(8, 8)))
    m = losses.sample_labelmix_mask(smap, seed=3).mask[0, 0]
    for c in np.unique(smap.labels):
        vals = m[smap.labels == c]
        assert np.all(vals == vals[0])


def test_mask_bit_frequency():
    smap = SemanticMap(labels=np.where(np.arange(16)[None, :] < 8, 0, 1) *
                       np.ones((8, 1), dtype=np.int64))
    freq = np.zeros(2)
    n = 1000
    for seed in range(n):
        m = losses.sample_labelmix_mask(smap, seed=seed).mask[0, 0]
        freq[0] += m[0, 0]
        freq[1] += m[0, -1]
    freq /= n
    assert np.all(np.abs(freq - 0.5) <= 0.05)


# ---------------------------------------------------------------------------
# mix consistency
# ---------------------------------------------------------------------------

def linear_pixel_d(seed=0, cout=4):
    rng = np.random.RandomState(seed)
    w = ad.Tensor(rng.standard_normal((cout, 3, 1, 1)))
    b = ad.Tensor(rng.standard_normal(cout))
    return lambda x: ad.conv2d(x, w, b, padding=0)


def test_consistency_zero_for_trivial_masks():
    rng = np.random.RandomState(1)
    d = linear_pixel_d()
    xr = ad.Tensor(rng.standard_normal((1, 3, 4, 4)))
    xf = ad.Tensor(rng.standard_normal((1, 3, 4, 4)))
    for mask in (np.ones((1, 1, 4, 4)), np.zeros((1, 1, 4, 4))):
        assert losses.labelmix_consistency(d, xr, xf, mask).item() == 0.0


def test_consistency_zero_for_per_pixel_linear_discriminator():
    rng = np.random.RandomState(2)
    d = linear_pixel_d(2)
    xr = ad.Tensor(rng.standard_normal((1, 3, 6, 6)))
    xf = ad.Tensor(rng.standard_normal((1, 3, 6, 6)))
    mask = (rng.uniform(size=(1, 1, 6, 6)) > 0.5).astype(float)
    assert losses.labelmix_consistency(d, xr, xf, mask).item() < 1e-12


def test_consistency_positive_for_spatial_discriminator():
    # binary masks commute with any per-pixel map, so a positive penalty
    # needs spatial context: a 3x3 conv plus relu suffices
    rng = np.random.RandomState(3)
    w = ad.Tensor(rng.standard_normal((4, 3, 3, 3)))
    b = ad.Tensor(rng.standard_normal(4))
    d = lambda x: ad.relu(ad.conv2d(x, w, b, padding=1))
    xr = ad.Tensor(rng.standard_normal((1, 3, 6, 6)))
    xf = ad.Tensor(rng.standard_normal((1, 3, 6, 6)))
    mask = (rng.uniform(size=(1, 1, 6, 6)) > 0.5).astype(float)
    assert losses.labelmix_consistency(d, xr, xf, mask).item() > 0.0


def test_consistency_reuses_precomputed_logits():
    rng = np.random.RandomState(4)
    d = linear_pixel_d(4)
    xr = ad.Tensor(rng.standard_normal((1, 3, 4, 4)))
    xf = ad.Tensor(rng.standard_normal((1, 3, 4, 4)))
    mask = (rng.uniform(size=(1, 1, 4, 4)) > 0.5).astype(float)
    a = losses.labelmix_consistency(d, xr, xf, mask)
    b = losses.labelmix_consistency(d, xr, xf, mask, d_real=d(xr), d_fake=d(xf))
    assert abs(a.item() - b.item()) < 1e-15
