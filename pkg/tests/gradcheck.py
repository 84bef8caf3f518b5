"""Central finite-difference oracle shared by the gradient tests."""

import numpy as np

FD_STEP = 1e-5


def finite_diff(f, t, h=FD_STEP):
    """Numerical gradient of the scalar-valued callable f w.r.t. tensor t.

    Perturbs t.data in place, one element at a time, and restores it.
    f must rebuild its forward pass on every call.
    """
    flat = t.data.ravel()
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(t.data.shape)


def rel_error(analytic, numeric):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_grads(build_loss, tensors, tol=1e-4):
    """Assert analytic gradients of build_loss() match finite differences.

    build_loss returns a scalar Tensor; tensors is a list of leaf tensors
    whose gradients are checked. Returns the worst relative error seen.
    """
    for t in tensors:
        t.zero_grad()
    loss = build_loss()
    loss.backward()
    worst = 0.0
    for t in tensors:
        assert t.grad is not None, "no gradient reached a checked tensor"
        analytic = t.grad.copy()
        numeric = finite_diff(lambda: build_loss().item(), t)
        err = rel_error(analytic, numeric)
        worst = max(worst, err)
        assert err < tol, f"gradient mismatch: rel error {err:.3e} >= {tol:.1e}"
    return worst
