"""Dense float64 tensors with reverse-mode automatic differentiation.

A small define-by-run engine: while a GradientTape is active, every
operation appends a node (output, parents, vjp closure) to the tape.
``backward(loss)`` walks the recorded nodes in reverse, accumulating
gradients into ``Tensor.grad`` buffers, then clears the tape.

Only the operations the encoder / coordinator / metric head need are
implemented; shapes are validated eagerly so failures name the operands.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, NumericError, ValidationError

_active_tape = None


class Tensor:
    """n-d float64 array, optionally participating in the active tape."""

    __slots__ = ("data", "grad")

    def __init__(self, data):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"

    # operator sugar; scalars and ndarrays are wrapped as constants
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __neg__(self):
        return mul(self, _as_tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __getitem__(self, key):
        return _slice(self, key)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class GradientTape:
    """Records operations for one backward pass.

    Exactly one tape may be active at a time; nodes are stored in
    execution order, which is already topological.
    """

    def __init__(self):
        self.nodes = []
        self.active = False

    def __enter__(self):
        global _active_tape
        if _active_tape is not None:
            raise ValidationError("another GradientTape is already active")
        _active_tape = self
        self.active = True
        return self

    def __exit__(self, exc_type, exc, tb):
        global _active_tape
        _active_tape = None
        self.active = False
        return False


def _record(out, parents, vjp):
    if _active_tape is not None and _active_tape.active:
        _active_tape.nodes.append((out, parents, vjp))
    return out


def backward(loss):
    """Reverse-accumulate gradients of ``loss`` into every tape ancestor.

    The loss must be a scalar recorded on the most recent tape; the tape
    is cleared afterwards so it cannot be replayed accidentally.
    """
    global _active_tape
    tape = _active_tape
    if tape is None or not tape.nodes:
        raise ValidationError("backward called without a recorded tape")
    if loss.data.size != 1:
        raise ValidationError(f"loss must be scalar, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    for out, parents, vjp in reversed(tape.nodes):
        g_out = grads.get(id(out))
        if g_out is None:
            continue
        for parent, g in zip(parents, vjp(g_out)):
            if g is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
            parent.grad = grads[key]
    loss.grad = grads[id(loss)]
    tape.nodes = []


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise / structural ops

def add(a, b):
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (
        _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def sub(a, b):
    out = Tensor(a.data - b.data)
    return _record(out, (a, b), lambda g: (
        _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)))


def mul(a, b):
    out = Tensor(a.data * b.data)
    return _record(out, (a, b), lambda g: (
        _unbroadcast(g * b.data, a.data.shape),
        _unbroadcast(g * a.data, b.data.shape)))


def div(a, b):
    out = Tensor(a.data / b.data)
    return _record(out, (a, b), lambda g: (
        _unbroadcast(g / b.data, a.data.shape),
        _unbroadcast(-g * a.data / (b.data ** 2), b.data.shape)))


def square(a):
    out = Tensor(a.data ** 2)
    return _record(out, (a,), lambda g: (g * 2.0 * a.data,))


def sqrt(a):
    root = np.sqrt(a.data)
    out = Tensor(root)
    return _record(out, (a,), lambda g: (g * 0.5 / root,))


def log(a):
    out = Tensor(np.log(a.data))
    return _record(out, (a,), lambda g: (g / a.data,))


def reshape(a, shape):
    out = Tensor(a.data.reshape(shape))
    return _record(out, (a,), lambda g: (g.reshape(a.data.shape),))


def transpose(a):
    if a.data.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {a.shape}")
    out = Tensor(a.data.T.copy())
    return _record(out, (a,), lambda g: (g.T,))


def _slice(a, key):
    out = Tensor(a.data[key].copy())

    def vjp(g):
        full = np.zeros_like(a.data)
        full[key] = g
        return (full,)

    return _record(out, (a,), vjp)


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(out, tuple(tensors), vjp)


def sum_(a, axis=None, keepdims=False):
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _record(out, (a,), vjp)


def mean(a, axis=None, keepdims=False):
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims))
    n = a.data.size // out.data.size

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape) / n,)

    return _record(out, (a,), vjp)


def relu(a):
    mask = a.data > 0
    out = Tensor(a.data * mask)
    return _record(out, (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# linear algebra and convolution

def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(
            f"matmul expects matrices, got shapes {a.shape} and {b.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    out = Tensor(a.data @ b.data)
    return _record(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def _im2col(x, k, stride, padding):
    n, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride, :, :]
    oh, ow = windows.shape[2], windows.shape[3]
    # (N, OH, OW, C*k*k)
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n, oh, ow, c * k * k)
    return cols, oh, ow


def _col2im(dcols, x_shape, k, stride, padding, oh, ow):
    n, c, h, w = x_shape
    hp, wp = h + 2 * padding, w + 2 * padding
    dx = np.zeros((n, c, hp, wp))
    dcols = dcols.reshape(n, oh, ow, c, k, k).transpose(0, 3, 1, 2, 4, 5)
    for ki in range(k):
        for kj in range(k):
            dx[:, :, ki:ki + stride * oh:stride, kj:kj + stride * ow:stride] \
                += dcols[:, :, :, :, ki, kj]
    if padding:
        dx = dx[:, :, padding:hp - padding, padding:wp - padding]
    return dx


def conv2d(x, kernel, stride=1, padding=0):
    """Cross-correlation of NCHW input with an OCkk kernel."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise DimensionError(
            f"conv2d expects 4D input and kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.data.shape
    o, kc, kh, kw = kernel.data.shape
    if kh != kw:
        raise DimensionError(f"kernel must be square, got {kernel.shape}")
    if kc != c:
        raise DimensionError(
            f"conv2d channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    if stride < 1:
        raise ValidationError(f"stride must be >= 1, got {stride}")
    if kh > h + 2 * padding or kh > w + 2 * padding:
        raise DimensionError(
            f"kernel {kernel.shape} larger than padded input {x.shape} (pad {padding})")
    cols, oh, ow = _im2col(x.data, kh, stride, padding)
    kmat = kernel.data.reshape(o, c * kh * kw)
    out_data = cols.reshape(-1, c * kh * kw) @ kmat.T
    out = Tensor(out_data.reshape(n, oh, ow, o).transpose(0, 3, 1, 2))

    def vjp(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, o)
        dkernel = (gmat.T @ cols.reshape(-1, c * kh * kw)).reshape(kernel.data.shape)
        dcols = gmat @ kmat
        dx = _col2im(dcols, x.data.shape, kh, stride, padding, oh, ow)
        return (dx, dkernel)

    return _record(out, (x, kernel), vjp)


def max_pool2(x):
    """2x2 stride-2 max pooling; odd spatial dims are padded with -inf."""
    if x.data.ndim != 4:
        raise DimensionError(f"max_pool2 expects NCHW input, got {x.shape}")
    n, c, h, w = x.data.shape
    data = x.data
    if h % 2 or w % 2:
        data = np.pad(data, ((0, 0), (0, 0), (0, h % 2), (0, w % 2)),
                      constant_values=-np.inf)
    hp, wp = data.shape[2], data.shape[3]
    oh, ow = hp // 2, wp // 2
    win = data.reshape(n, c, oh, 2, ow, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, oh, ow, 4)
    idx = win.argmax(axis=-1)
    out = Tensor(np.take_along_axis(win, idx[..., None], axis=-1)[..., 0])

    def vjp(g):
        dwin = np.zeros((n, c, oh, ow, 4))
        np.put_along_axis(dwin, idx[..., None], g[..., None], axis=-1)
        dpad = dwin.reshape(n, c, oh, ow, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        dpad = dpad.reshape(n, c, hp, wp)
        return (dpad[:, :, :h, :w],)

    return _record(out, (x,), vjp)


# ---------------------------------------------------------------------------
# classification head ops

def softmax(x, axis=-1):
    if x.data.shape == () or x.data.shape[axis] == 0:
        raise DimensionError(f"softmax on empty axis {axis} of shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(s)

    def vjp(g):
        inner = (g * s).sum(axis=axis, keepdims=True)
        return (s * (g - inner),)

    return _record(out, (x,), vjp)


def log_softmax_data(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy(logits, target):
    """Mean negative log-likelihood of integer classes or one-hot rows."""
    if logits.data.ndim != 2:
        raise DimensionError(f"cross_entropy expects BxC logits, got {logits.shape}")
    b, c = logits.data.shape
    if c < 2:
        raise ValidationError(f"cross_entropy needs >= 2 classes, got {c}")
    if isinstance(target, Tensor):
        target = target.data
    target = np.asarray(target)
    if target.ndim == 2:
        onehot = target.astype(np.float64)
        if onehot.shape != (b, c):
            raise DimensionError(
                f"one-hot target shape {onehot.shape} != logits shape {(b, c)}")
    else:
        idx = target.astype(np.int64)
        if idx.shape != (b,):
            raise DimensionError(f"target shape {idx.shape} != batch ({b},)")
        if idx.min() < 0 or idx.max() >= c:
            raise ValidationError(
                f"class index out of range [0, {c}): {idx.tolist()}")
        onehot = np.zeros((b, c))
        onehot[np.arange(b), idx] = 1.0
    logp = log_softmax_data(logits.data)
    out = Tensor(-(onehot * logp).sum() / b)
    probs = np.exp(logp)

    def vjp(g):
        return (g * (probs - onehot) / b,)

    return _record(out, (logits,), vjp)


# ---------------------------------------------------------------------------
# gradient verification oracle

def finite_diff_check(f, params, h=1e-5, atol=1e-7):
    """Max relative error between tape gradients and central differences.

    ``f`` must be a deterministic closure over ``params`` returning a
    scalar Tensor; it is re-evaluated 2 x size(params) times.

    Differences below ``atol`` count as exact agreement: central
    differences carry a floating-point noise floor of ~eps*|f|/h
    (~1e-11 at h=1e-5), so for elements whose true gradient is zero —
    e.g. a parameter feeding only dead ReLU channels — the relative
    metric would amplify that noise to O(1).

    The graph is piecewise smooth (ReLU, max-pool), so a ±h interval
    can straddle a kink, where central differences measure a slope the
    gradient does not define. When the forward and backward one-sided
    differences disagree beyond curvature scale, the element is
    re-measured with a 100x smaller step to land inside one smooth
    piece.
    """
    if h <= 0:
        raise ValidationError(f"step h must be positive, got {h}")
    with GradientTape():
        out = f()
        backward(out)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy()
                for p in params]
    f0 = float(out.data)
    worst = 0.0
    for pi, (p, ga) in enumerate(zip(params, analytic)):
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            step = h
            for _ in range(2):
                flat[i] = orig + step
                fp = float(f().data)
                flat[i] = orig - step
                fm = float(f().data)
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise NumericError(
                        f"non-finite loss while perturbing parameter {pi} "
                        f"index {i}")
                fwd = (fp - f0) / step
                bwd = (f0 - fm) / step
                if abs(fwd - bwd) <= 1e-3 * (abs(fwd) + abs(bwd)) + atol:
                    break
                step /= 100.0
            numeric = (fp - fm) / (2.0 * step)
            diff = abs(gflat[i] - numeric)
            if diff <= atol:
                continue
            err = diff / (abs(gflat[i]) + abs(numeric) + 1e-12)
            worst = max(worst, err)
    return worst
