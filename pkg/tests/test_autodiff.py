import numpy as np
import pytest

from contscene import autodiff as ad
from gradcheck import check_grads


def t(data, grad=True):
    return ad.Tensor(np.asarray(data, dtype=np.float64), requires_grad=grad)


# ---------------------------------------------------------------------------
# conv2d
# ---------------------------------------------------------------------------

def test_conv_identity_kernel():
    x = t([[[[5.0]]]], grad=False)
    w = t([[[[1.0]]]], grad=False)
    b = t([0.0], grad=False)
    y = ad.conv2d(x, w, b, padding=0)
    assert y.data.shape == (1, 1, 1, 1)
    assert y.data[0, 0, 0, 0] == 5.0


def test_conv_full_overlap_sum():
    x = t(np.ones((1, 1, 3, 3)), grad=False)
    w = t(np.ones((1, 1, 3, 3)), grad=False)
    b = t([0.0], grad=False)
    y = ad.conv2d(x, w, b, padding=1)
    assert y.data.shape == (1, 1, 3, 3)
    assert y.data[0, 0, 1, 1] == 9.0


def test_conv_shape_mismatch_names_both_shapes():
    x = t(np.zeros((1, 3, 4, 4)))
    w = t(np.zeros((2, 2, 3, 3)))
    b = t(np.zeros(2))
    with pytest.raises(ValueError) as e:
        ad.conv2d(x, w, b, padding=1)
    assert "(1, 3, 4, 4)" in str(e.value) and "(2, 2, 3, 3)" in str(e.value)


def test_conv_even_kernel_rejected():
    x = t(np.zeros((1, 1, 4, 4)))
    w = t(np.zeros((1, 1, 2, 2)))
    b = t(np.zeros(1))
    with pytest.raises(ValueError):
        ad.conv2d(x, w, b, padding=0)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_conv_gradients_vs_finite_differences(seed):
    rng = np.random.RandomState(seed)
    x = t(rng.standard_normal((1, 2, 4, 4)))
    w = t(rng.standard_normal((3, 2, 3, 3)))
    b = t(rng.standard_normal(3))
    proj = rng.standard_normal((1, 3, 4, 4))

    def loss():
        return ad.total_sum(ad.mul(ad.conv2d(x, w, b, padding=1), ad.Tensor(proj)))

    check_grads(loss, [x, w, b], tol=1e-4)


# ---------------------------------------------------------------------------
# instance_norm
# ---------------------------------------------------------------------------

def test_instance_norm_constant_channel_is_zero():
    x = t(np.full((1, 2, 3, 3), 4.2), grad=False)
    g = t(np.ones(2), grad=False)
    b = t(np.zeros(2), grad=False)
    y = ad.instance_norm(x, g, b, eps=1e-5)
    assert np.allclose(y.data, 0.0)


def test_instance_norm_zero_gamma_gives_beta():
    rng = np.random.RandomState(3)
    x = t(rng.standard_normal((2, 3, 4, 4)), grad=False)
    g = t(np.zeros(3), grad=False)
    b = t(np.full(3, 7.0), grad=False)
    y = ad.instance_norm(x, g, b, eps=1e-5)
    assert np.all(y.data == 7.0)


def test_instance_norm_statistics():
    rng = np.random.RandomState(4)
    eps = 1e-5
    xd = rng.standard_normal((2, 3, 4, 4))
    y = ad.instance_norm(t(xd, grad=False), t(np.ones(3), grad=False),
                         t(np.zeros(3), grad=False), eps=eps).data
    for n in range(2):
        for c in range(3):
            assert abs(y[n, c].mean()) < 1e-10
            var = xd[n, c].var()
            expected = var / (var + eps)
            assert abs(y[n, c].var() - expected) < 1e-6


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_instance_norm_gradients(seed):
    rng = np.random.RandomState(seed)
    x = t(rng.standard_normal((2, 2, 3, 3)))
    g = t(rng.standard_normal(2))
    b = t(rng.standard_normal(2))
    proj = rng.standard_normal((2, 2, 3, 3))

    def loss():
        return ad.total_sum(ad.mul(ad.instance_norm(x, g, b, eps=1e-5), ad.Tensor(proj)))

    check_grads(loss, [x, g, b], tol=1e-4)


# ---------------------------------------------------------------------------
# log_softmax_channels
# ---------------------------------------------------------------------------

def test_log_softmax_equal_logits():
    x = t(np.zeros((1, 2, 1, 1)), grad=False)
    y = ad.log_softmax_channels(x)
    assert np.allclose(y.data, np.log(0.5))


def test_log_softmax_extreme_logits_stable():
    x = t(np.array([1000.0, 0.0]).reshape(1, 2, 1, 1), grad=False)
    y = ad.log_softmax_channels(x).data
    assert np.all(np.isfinite(y))
    assert abs(y[0, 0, 0, 0] - 0.0) < 1e-12
    assert abs(y[0, 1, 0, 0] + 1000.0) < 1e-12


def test_log_softmax_normalization_property():
    rng = np.random.RandomState(5)
    x = t(rng.standard_normal((2, 5, 3, 3)) * 10, grad=False)
    y = ad.log_softmax_channels(x).data
    sums = np.exp(y).sum(axis=1)
    assert np.max(np.abs(sums - 1.0)) < 1e-12


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_log_softmax_gradients(seed):
    rng = np.random.RandomState(seed)
    x = t(rng.standard_normal((1, 5, 2, 2)))
    proj = rng.standard_normal((1, 5, 2, 2))

    def loss():
        return ad.total_sum(ad.mul(ad.log_softmax_channels(x), ad.Tensor(proj)))

    check_grads(loss, [x], tol=1e-4)


# ---------------------------------------------------------------------------
# resampling, pointwise, shape ops
# ---------------------------------------------------------------------------

def test_upsample_nearest_values():
    x = t([[[[3.0]]]], grad=False)
    y = ad.upsample_nearest(x, 2)
    assert y.data.shape == (1, 1, 2, 2)
    assert np.all(y.data == 3.0)


def test_upsample_gradient_sums_contributions():
    x = t(np.ones((1, 1, 2, 2)))
    y = ad.total_sum(ad.upsample_nearest(x, 3))
    y.backward()
    assert np.all(x.grad == 9.0)


def test_relu_values():
    x = t([-1.0, 2.0], grad=False)
    y = ad.relu(x)
    assert list(y.data) == [0.0, 2.0]


def test_leaky_relu_values():
    x = t([-2.0, 4.0], grad=False)
    y = ad.leaky_relu(x, 0.25)
    assert list(y.data) == [-0.5, 4.0]


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_hadamard_gradients(seed):
    rng = np.random.RandomState(seed)
    a = t(rng.standard_normal((1, 2, 3, 3)))
    b = t(rng.standard_normal((1, 2, 3, 3)))

    def loss():
        return ad.total_sum(ad.mul(a, b))

    check_grads(loss, [a, b], tol=1e-4)


def test_broadcast_mul_gradients():
    rng = np.random.RandomState(7)
    a = t(rng.standard_normal((1, 3, 2, 2)))
    m = t(rng.standard_normal((1, 1, 2, 2)))

    def loss():
        return ad.total_sum(ad.mul(a, m))

    check_grads(loss, [a, m], tol=1e-4)


def test_div_gradients():
    rng = np.random.RandomState(8)
    a = t(rng.standard_normal((2, 3)))
    b = t(rng.standard_normal((2, 3)) + 3.0)

    def loss():
        return ad.total_sum(ad.div(a, b))

    check_grads(loss, [a, b], tol=1e-4)


def test_avg_pool_and_tanh_gradients():
    rng = np.random.RandomState(9)
    x = t(rng.standard_normal((1, 2, 4, 4)))

    def loss():
        return ad.total_sum(ad.tanh(ad.avg_pool2(x)))

    check_grads(loss, [x], tol=1e-4)


def test_avg_pool_rejects_odd_dims():
    x = t(np.zeros((1, 1, 3, 4)))
    with pytest.raises(ValueError):
        ad.avg_pool2(x)


def test_concat_and_slice_gradients():
    rng = np.random.RandomState(10)
    a = t(rng.standard_normal((1, 2, 2, 2)))
    b = t(rng.standard_normal((1, 3, 2, 2)))

    def loss():
        cat = ad.concat_channels([a, b])
        return ad.total_sum(ad.slice_channels(cat, 1, 4))

    check_grads(loss, [a, b], tol=1e-4)


def test_tile_batch_gradient():
    x = t(np.ones((1, 2, 2, 2)))
    y = ad.total_sum(ad.tile_batch(x, 3))
    y.backward()
    assert np.all(x.grad == 3.0)


# ---------------------------------------------------------------------------
# backward semantics
# ---------------------------------------------------------------------------

def test_backward_sum_gives_ones():
    x = t(np.zeros((2, 2)))
    ad.total_sum(x).backward()
    assert np.all(x.grad == 1.0)


def test_backward_quadratic():
    x = t([1.0, 2.0])
    ad.total_sum(ad.mul(x, x)).backward()
    assert list(x.grad) == [2.0, 4.0]


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_backward_composed_conv_relu_sum(seed):
    rng = np.random.RandomState(seed)
    x = t(rng.standard_normal((1, 2, 4, 4)) + 0.1)
    w = t(rng.standard_normal((2, 2, 3, 3)))
    b = t(rng.standard_normal(2))

    def loss():
        return ad.total_sum(ad.relu(ad.conv2d(x, w, b, padding=1)))

    check_grads(loss, [x, w, b], tol=1e-4)


def test_backward_rejects_non_scalar():
    x = t(np.zeros((2, 2)))
    y = ad.add(x, x)
    with pytest.raises(ValueError):
        y.backward()


def test_repeated_backward_accumulates():
    x = t([3.0])
    y = ad.total_sum(ad.mul(x, x))
    y.backward()
    first = x.grad.copy()
    y.backward()
    assert np.allclose(x.grad, 2 * first)


def test_no_grad_blocks_recording():
    x = t([1.0])
    with ad.no_grad():
        y = ad.mul(x, x)
    assert not y.requires_grad
    assert y._backward is None


def test_frozen_tensor_receives_no_gradient():
    x = t([2.0], grad=False)
    w = t([3.0])
    ad.total_sum(ad.mul(x, w)).backward()
    assert x.grad is None
    assert w.grad is not None


# ---------------------------------------------------------------------------
# finiteness property
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("seed", [0, 1, 2])
def test_forward_ops_map_finite_to_finite(seed):
    rng = np.random.RandomState(seed)
    x = t(rng.standard_normal((2, 4, 8, 8)) * 50, grad=False)
    w = t(rng.standard_normal((4, 4, 3, 3)) * 50, grad=False)
    b = t(rng.standard_normal(4), grad=False)
    g = t(rng.standard_normal(4), grad=False)
    z = t(np.zeros(4), grad=False)
    h = ad.conv2d(x, w, b, padding=1)
    h = ad.instance_norm(h, g, z, eps=1e-5)
    h = ad.leaky_relu(h, 0.2)
    h = ad.log_softmax_channels(h)
    h = ad.tanh(ad.avg_pool2(h))
    h = ad.upsample_nearest(h, 2)
    assert np.all(np.isfinite(h.data))


def test_constant_input_instance_norm_finite():
    x = t(np.zeros((1, 2, 4, 4)), grad=False)
    y = ad.instance_norm(x, t(np.ones(2), grad=False), t(np.zeros(2), grad=False), eps=1e-5)
    assert np.all(np.isfinite(y.data))


# ---------------------------------------------------------------------------
# Parameter
# ---------------------------------------------------------------------------

def test_parameter_freeze_clears_grad_path():
    p = ad.Parameter("w", np.ones(3))
    assert p.tensor.requires_grad
    p.freeze()
    assert not p.trainable
    ad.total_sum(ad.mul(p.tensor, p.tensor)).backward()
    assert p.tensor.grad is None


def test_params_detached_context():
    p = ad.Parameter("w", np.ones(2))
    with ad.params_detached([p]):
        ad.total_sum(ad.mul(p.tensor, p.tensor)).backward()
        assert p.tensor.grad is None
    assert p.tensor.requires_grad
