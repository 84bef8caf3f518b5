"""Dense float64 tensors with reverse-mode automatic differentiation.

This is a deliberately small engine: it implements exactly the operation
set the generator, the discriminator and the training losses need
(2D convolution, instance normalization, channel log-softmax,
nearest-neighbour resampling and a handful of pointwise/reduction
primitives).  Every forward call records a backward closure; calling
``backward`` on a scalar walks the recorded graph in reverse topological
order and accumulates gradients into every reachable tensor that has
``requires_grad`` set.

All storage is row-major float64 (NCHW for image-like data).
"""

import contextlib

import numpy as np

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (pure inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """N-dimensional float64 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ValueError(f"item() needs a scalar, got shape {self.data.shape}")
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


_pass_grads = None


def backward(loss):
    """Accumulate d(loss)/dt into ``t.grad`` for every reachable tensor.

    ``loss`` must be a scalar produced by recorded operations.  Each call
    propagates through a pass-local gradient map, so repeated calls keep
    accumulating into ``.grad`` until gradients are cleared.
    """
    global _pass_grads
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    pass_grads = {id(loss): np.ones_like(loss.data)} if loss.requires_grad else {}
    _pass_grads = pass_grads
    try:
        for node in reversed(topo):
            g = pass_grads.get(id(node))
            if g is not None and node._backward is not None:
                node._backward(g)
    finally:
        _pass_grads = None
    # grads are never mutated in place, so sharing buffers between passes is safe
    for node in topo:
        g = pass_grads.get(id(node))
        if g is not None:
            node.grad = g if node.grad is None else node.grad + g


def _accumulate(t, g):
    if not t.requires_grad:
        return
    if _pass_grads is not None:
        prev = _pass_grads.get(id(t))
        _pass_grads[id(t)] = g if prev is None else prev + g
    else:
        t.grad = g if t.grad is None else t.grad + g


def _record(data, parents, backward_fn):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g, shape):
    """Reduce a broadcast gradient back to the original operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# pointwise / arithmetic
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _record(a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _record(a.data - b.data, (a, b), bw)


def mul(a, b):
    """Hadamard product with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _record(a.data * b.data, (a, b), bw)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _record(a.data / b.data, (a, b), bw)


def scale(a, s):
    s = float(s)

    def bw(g):
        _accumulate(a, g * s)

    return _record(a.data * s, (a,), bw)


def relu(a):
    # subgradient 1 at exactly 0 so zero-initialized branches can start learning
    mask = a.data >= 0

    def bw(g):
        _accumulate(a, g * mask)

    return _record(np.where(mask, a.data, 0.0), (a,), bw)


def leaky_relu(a, slope=0.2):
    mask = a.data > 0

    def bw(g):
        _accumulate(a, g * np.where(mask, 1.0, slope))

    return _record(np.where(mask, a.data, slope * a.data), (a,), bw)


def tanh(a):
    y = np.tanh(a.data)

    def bw(g):
        _accumulate(a, g * (1.0 - y * y))

    return _record(y, (a,), bw)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def reshape(a, shape):
    orig = a.data.shape

    def bw(g):
        _accumulate(a, g.reshape(orig))

    return _record(a.data.reshape(shape), (a,), bw)


def tile_batch(a, n):
    """Repeat a [1, ...] tensor n times along the batch axis."""
    if a.data.shape[0] != 1:
        raise ValueError(f"tile_batch expects batch size 1, got shape {a.data.shape}")
    if n == 1:
        return a

    def bw(g):
        _accumulate(a, g.sum(axis=0, keepdims=True))

    return _record(np.repeat(a.data, n, axis=0), (a,), bw)


def concat_channels(tensors):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[1] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, c0, c1 in zip(tensors, offsets[:-1], offsets[1:]):
            _accumulate(t, g[:, c0:c1])

    return _record(np.concatenate([t.data for t in tensors], axis=1), tensors, bw)


def slice_channels(a, c0, c1):
    def bw(g):
        full = np.zeros_like(a.data)
        full[:, c0:c1] = g
        _accumulate(a, full)

    return _record(a.data[:, c0:c1].copy(), (a,), bw)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def total_sum(a):
    def bw(g):
        _accumulate(a, np.full_like(a.data, float(g)))

    return _record(np.asarray(a.data.sum()), (a,), bw)


def total_mean(a):
    n = a.data.size

    def bw(g):
        _accumulate(a, np.full_like(a.data, float(g) / n))

    return _record(np.asarray(a.data.mean()), (a,), bw)


# ---------------------------------------------------------------------------
# image ops
# ---------------------------------------------------------------------------

def _im2col(xd, k, p):
    """Channel-major patch matrix [Cin*K*K, N*Ho*Wo] of a padded NCHW array."""
    n, cin, h, w_ = xd.shape
    ho, wo = h + 2 * p - k + 1, w_ + 2 * p - k + 1
    if p:
        xp = np.zeros((n, cin, h + 2 * p, w_ + 2 * p))
        xp[:, :, p:p + h, p:p + w_] = xd
    else:
        xp = xd
    s = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp, (cin, k, k, n, ho, wo), (s[1], s[2], s[3], s[0], s[2], s[3]))
    return np.ascontiguousarray(windows).reshape(cin * k * k, n * ho * wo)


def conv2d(x, w, b, padding):
    """Cross-correlation of x [N,Cin,H,W] with w [Cout,Cin,K,K] plus bias.

    Zero padding, stride 1, odd square kernels.  Gradients flow to x, w
    and b when required.
    """
    xd, wd, bd = x.data, w.data, b.data
    if xd.ndim != 4 or wd.ndim != 4:
        raise ValueError(f"conv2d needs 4-d input and weight, got {xd.shape} and {wd.shape}")
    n, cin, h, w_ = xd.shape
    cout, cin_w, k, k2 = wd.shape
    if k != k2 or k % 2 != 1:
        raise ValueError(f"conv2d kernel must be square with odd size, got {wd.shape}")
    if cin != cin_w:
        raise ValueError(f"conv2d channel mismatch: input {xd.shape} vs weight {wd.shape}")
    if bd.shape != (cout,):
        raise ValueError(f"conv2d bias shape {bd.shape} does not match weight {wd.shape}")
    p = int(padding)
    ho, wo = h + 2 * p - k + 1, w_ + 2 * p - k + 1
    if ho <= 0 or wo <= 0:
        raise ValueError(f"conv2d output would be empty for input {xd.shape}, kernel {wd.shape}")

    colmat = _im2col(xd, k, p)
    wmat = wd.reshape(cout, -1)
    y = wmat @ colmat
    y += bd[:, None]
    y = np.ascontiguousarray(y.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3))

    def bw(g):
        gm = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(cout, n * ho * wo)
        if b.requires_grad:
            _accumulate(b, gm.sum(axis=1))
        if w.requires_grad:
            _accumulate(w, (gm @ colmat.T).reshape(wd.shape))
        if x.requires_grad:
            # dX is the full correlation of g with the flipped, channel-swapped kernel
            wt = np.ascontiguousarray(
                wd.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1]).reshape(cin, -1)
            gcol = _im2col(g, k, k - 1 - p)
            dx = (wt @ gcol).reshape(cin, n, h, w_).transpose(1, 0, 2, 3)
            _accumulate(x, dx)

    return _record(y, (x, w, b), bw)


def instance_norm(x, gamma, beta, eps=1e-5):
    """Per-sample, per-channel normalization over spatial dims plus affine.

    Variance uses the population convention (divide by H*W).
    """
    xd = x.data
    if xd.ndim != 4:
        raise ValueError(f"instance_norm needs 4-d input, got {xd.shape}")
    n, c, h, w = xd.shape
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ValueError(
            f"instance_norm affine shapes {gamma.data.shape}/{beta.data.shape} "
            f"do not match {c} channels")
    if eps <= 0:
        raise ValueError(f"instance_norm eps must be positive, got {eps}")
    mu = xd.mean(axis=(2, 3), keepdims=True)
    var = xd.var(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    gd = gamma.data.reshape(1, c, 1, 1)
    y = gd * xhat + beta.data.reshape(1, c, 1, 1)

    def bw(g):
        if beta.requires_grad:
            _accumulate(beta, g.sum(axis=(0, 2, 3)))
        if gamma.requires_grad:
            _accumulate(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dxh = g * gd
            m1 = dxh.mean(axis=(2, 3), keepdims=True)
            m2 = (dxh * xhat).mean(axis=(2, 3), keepdims=True)
            _accumulate(x, inv * (dxh - m1 - xhat * m2))

    return _record(y, (x, gamma, beta), bw)


def log_softmax_channels(x):
    """Per-pixel log-softmax over the channel axis, stabilized by max shift."""
    xd = x.data
    z = xd - xd.max(axis=1, keepdims=True)
    y = z - np.log(np.exp(z).sum(axis=1, keepdims=True))

    def bw(g):
        _accumulate(x, g - np.exp(y) * g.sum(axis=1, keepdims=True))

    return _record(y, (x,), bw)


def upsample_nearest(x, factor):
    xd = x.data
    f = int(factor)
    n, c, h, w = xd.shape
    y = xd.repeat(f, axis=2).repeat(f, axis=3)

    def bw(g):
        _accumulate(x, g.reshape(n, c, h, f, w, f).sum(axis=(3, 5)))

    return _record(y, (x,), bw)


def avg_pool2(x):
    """2x2 average pooling with stride 2; spatial dims must be even."""
    xd = x.data
    n, c, h, w = xd.shape
    if h % 2 or w % 2:
        raise ValueError(f"avg_pool2 needs even spatial dims, got {xd.shape}")
    y = xd.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def bw(g):
        _accumulate(x, (g / 4.0).repeat(2, axis=2).repeat(2, axis=3))

    return _record(y, (x,), bw)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

BASE_TAG = "BASE"


class Parameter:
    """A named model parameter.

    Frozen parameters (``trainable=False``) never receive gradients and
    are never touched by the optimizer; their byte content is stable for
    the lifetime of a model.
    """

    __slots__ = ("name", "tensor", "trainable", "domain_tag")

    def __init__(self, name, data, trainable=True, domain_tag=BASE_TAG):
        self.name = name
        self.trainable = bool(trainable)
        self.domain_tag = domain_tag
        self.tensor = Tensor(np.array(data, dtype=np.float64), requires_grad=self.trainable)

    @property
    def data(self):
        return self.tensor.data

    @data.setter
    def data(self, value):
        self.tensor.data = np.asarray(value, dtype=np.float64)

    def freeze(self):
        self.trainable = False
        self.tensor.requires_grad = False
        self.tensor.grad = None

    def __repr__(self):
        return (f"Parameter({self.name!r}, shape={self.data.shape}, "
                f"trainable={self.trainable}, domain={self.domain_tag!r})")


@contextlib.contextmanager
def params_detached(params):
    """Temporarily stop gradient flow into the given parameters."""
    prev = [(p, p.tensor.requires_grad) for p in params]
    for p in params:
        p.tensor.requires_grad = False
    try:
        yield
    finally:
        for p, r in prev:
            p.tensor.requires_grad = r
