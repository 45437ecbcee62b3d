"""Dense tensors with reverse-mode automatic differentiation.

Every op returns a new :class:`Tensor`; when any input requires a gradient the
output records its parents and a backward rule. :func:`backward` walks that
graph once, in reverse topological order, accumulating ``grad`` on every leaf
that asked for one. The graph is rebuilt on every forward pass.

Arrays are numpy, NCHW for images. 64-bit is the default width; 32-bit inputs
stay 32-bit.
"""
from __future__ import annotations

import contextlib

import numpy as np

from . import _core

__all__ = [
    "Tensor", "NonFiniteError", "ShapeError", "no_grad", "backward",
    "add", "sub", "mul", "neg", "exp", "abs", "relu", "sigmoid", "square",
    "sum", "mean", "abs_sum", "squared_sum", "reshape", "concat", "take",
    "matmul", "linear", "conv2d", "conv_transpose2d", "upsample2x",
    "stop_gradient", "masked", "atan2", "wrap_angle", "l2_normalize",
]

_GRAD_ENABLED = True


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "name")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._op = "leaf"
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return sum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float64
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents, backward_fn, op):
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced a non-finite value")
    out = Tensor(data)
    out._op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == tuple(shape):
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ----------------------------------------------------------------------------
# Graph traversal


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf requiring it."""
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise ValueError("backward() needs a scalar loss tensor")
    if not loss.requires_grad:
        return
    order, seen = [], set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


# ----------------------------------------------------------------------------
# Elementwise


def add(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
                 "mul")


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a):
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def abs(a):  # noqa: A001 - mirrors numpy naming
    sign = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


def square(a):
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2.0 * ad * g,), "square")


def relu(a):
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0).astype(a.dtype), (a,), lambda g: (g * pos,), "relu")


def sigmoid(a):
    out = 0.5 * (np.tanh(0.5 * a.data) + 1.0)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def masked(a, keep):
    """Zero ``a`` where ``keep`` is False; gradients there are exactly +0."""
    keep = np.broadcast_to(np.asarray(keep, bool), a.shape)
    zero = a.data.dtype.type(0)
    return _make(np.where(keep, a.data, zero), (a,), lambda g: (np.where(keep, g, zero),), "masked")


def stop_gradient(a):
    """Forward identity; contributes no gradient."""
    return Tensor(a.data.copy())


def atan2(y, x):
    yd, xd = y.data, x.data
    r2 = xd * xd + yd * yd
    if np.any(r2 == 0):
        raise NonFiniteError("atan2 gradient undefined at the origin")
    return _make(np.arctan2(yd, xd), (y, x),
                 lambda g: (_unbroadcast(g * xd / r2, yd.shape),
                            _unbroadcast(-g * yd / r2, xd.shape)), "atan2")


def wrap_angle(a):
    """Map angles to (-pi, pi]; the 2*pi*k shift has zero derivative."""
    wrapped = np.pi - np.mod(np.pi - a.data, 2 * np.pi)
    return _make(wrapped, (a,), lambda g: (g,), "wrap_angle")


def l2_normalize(a, axis=1, eps=1e-12):
    """Scale ``a`` to unit Euclidean norm along ``axis``."""
    norm = np.sqrt(np.square(a.data).sum(axis=axis, keepdims=True) + eps)
    out = a.data / norm

    def bw(g):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm,)

    return _make(out, (a,), bw, "l2_normalize")


# ----------------------------------------------------------------------------
# Reductions and shape


def sum(a, axis=None):  # noqa: A001
    shape = a.shape
    out = np.asarray(a.data.sum(axis=axis))

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(out, (a,), bw, "sum")


def mean(a, axis=None):
    count = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    shape = a.shape
    out = np.asarray(a.data.mean(axis=axis))

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return _make(out, (a,), bw, "mean")


def abs_sum(a):
    """Sum of absolute values (L1)."""
    sign = np.sign(a.data)
    return _make(np.asarray(np.abs(a.data).sum()), (a,), lambda g: (g * sign,), "abs_sum")


def squared_sum(a):
    """Sum of squares (squared L2)."""
    ad = a.data
    return _make(np.asarray((ad * ad).sum()), (a,), lambda g: (2.0 * g * ad,), "squared_sum")


def reshape(a, shape):
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {old} as {shape}") from None
    return _make(out, (a,), lambda g: (g.reshape(old),), "reshape")


def take(a, index, axis):
    """Slice ``a`` along ``axis`` with a python slice or integer array."""
    sl = [slice(None)] * a.data.ndim
    sl[axis] = index
    sl = tuple(sl)
    shape = a.shape

    def bw(g):
        out = np.zeros(shape, dtype=g.dtype)
        if isinstance(index, slice):
            out[sl] = g
        else:
            np.add.at(out, sl, g)
        return (out,)

    return _make(a.data[sl].copy(), (a,), bw, "take")


def concat(tensors, axis=1):
    """Concatenate along ``axis`` (channels by default)."""
    ref = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)
        ):
            raise ShapeError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                 lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def upsample2x(a):
    """Nearest-neighbour 2x upsampling of an NCHW tensor."""
    n, c, h, w = a.shape
    out = a.data.repeat(2, axis=2).repeat(2, axis=3)
    return _make(out, (a,), lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),), "upsample2x")


# ----------------------------------------------------------------------------
# Linear algebra and convolution


def matmul(a, b):
    if a.shape[-1] != b.shape[0] or b.data.ndim != 2:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def linear(x, weight, bias=None):
    """``x @ weight.T + bias`` with ``weight`` shaped (out, in)."""
    if x.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} vs weight {weight.shape} (axis 1 must match)")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    parents = (x, weight)
    if bias is not None:
        out = out + bias.data
        parents = (x, weight, bias)

    def bw(g):
        grads = (g @ wd, g.T @ xd)
        return grads + (g.sum(axis=0),) if bias is not None else grads

    return _make(out, parents, bw, "linear")


def _conv_out(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def conv2d(x, weight, bias=None, stride=1, pad=0):
    """2-D cross-correlation, NCHW input, (F, C, kh, kw) weight."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and weight, got {x.shape}, {weight.shape}")
    n, c, h, w = x.shape
    f, wc, kh, kw = weight.shape
    if wc != c:
        raise ShapeError(f"conv2d: input channels (axis 1) {c} != weight channels (axis 1) {wc}")
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} exceeds padded input {h + 2 * pad}x{w + 2 * pad} (axes 2, 3)")
    if stride < 1:
        raise ValueError("conv2d: stride must be >= 1")
    oh, ow = _conv_out(h, kh, stride, pad), _conv_out(w, kw, stride, pad)
    cols = _core.im2col(x.data, kh, kw, stride, pad)
    wm = weight.data.reshape(f, -1)
    out = np.matmul(wm, cols)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(n, f, oh, ow)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g = g.reshape(n, f, oh * ow)
        dx = None
        if x.requires_grad:
            dx = _core.col2im(np.matmul(wm.T, g), c, h, w, kh, kw, stride, pad)
        dw = np.tensordot(g, cols, axes=([0, 2], [0, 2])).reshape(weight.shape)
        grads = (dx, dw)
        return grads + (g.sum(axis=(0, 2)),) if bias is not None else grads

    return _make(out, parents, bw, "conv2d")


def conv_transpose2d(x, weight, bias=None, stride=1, pad=0):
    """Adjoint of :func:`conv2d`; weight shaped (C_in, F, kh, kw)."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"conv_transpose2d: expected 4-D tensors, got {x.shape}, {weight.shape}")
    n, c, h, w = x.shape
    wc, f, kh, kw = weight.shape
    if wc != c:
        raise ShapeError(f"conv_transpose2d: input channels (axis 1) {c} != weight axis 0 {wc}")
    oh = (h - 1) * stride - 2 * pad + kh
    ow = (w - 1) * stride - 2 * pad + kw
    if oh < 1 or ow < 1:
        raise ShapeError("conv_transpose2d: empty output (axes 2, 3)")
    wm = weight.data.reshape(c, -1)
    xf = x.data.reshape(n, c, h * w)
    cols = np.matmul(wm.T, xf)
    out = _core.col2im(cols, f, oh, ow, kh, kw, stride, pad)
    if bias is not None:
        out += bias.data[:, None, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gcols = _core.im2col(np.ascontiguousarray(g), kh, kw, stride, pad)
        dx = np.matmul(wm, gcols).reshape(x.shape) if x.requires_grad else None
        dw = np.tensordot(xf, gcols, axes=([0, 2], [0, 2])).reshape(weight.shape)
        grads = (dx, dw)
        return grads + (g.sum(axis=(0, 2, 3)),) if bias is not None else grads

    return _make(out, parents, bw, "conv_transpose2d")
