"""Dense n-d tensor with reverse-mode automatic differentiation.

Every op returns a new :class:`Tensor`; when any input requires a gradient the
result records its parents and a closure mapping the output gradient to one
gradient per parent.  ``Tensor.backward`` walks the recorded graph in reverse
topological order.  Arrays are numpy, row-major, float32 (train) or float64
(verify).  Mixing the two in one op is an error.
"""
from __future__ import annotations

import enum
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

_ALLOWED = (np.dtype(np.float32), np.dtype(np.float64))


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Precision(enum.Enum):
    VERIFY = "verify"
    TRAIN = "train"

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(np.float64) if self is Precision.VERIFY else np.dtype(np.float32)

    @classmethod
    def parse(cls, value) -> "Precision":
        if isinstance(value, Precision):
            return value
        return cls(str(value).lower())


_mode = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_mode, "grad", True)


@contextmanager
def no_grad():
    prev = is_grad_enabled()
    _mode.grad = False
    try:
        yield
    finally:
        _mode.grad = prev


class Tensor:
    """n-d real array with an optional gradient.

    ``grad`` is exposed for every tensor with ``requires_grad``; it reads as
    zeros until a backward pass has accumulated into it.  Gradients are only
    stored on leaves (tensors created directly rather than by an op).
    """

    __slots__ = ("data", "requires_grad", "_grad", "_parents", "_backward", "name", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.array(data, dtype=dtype, copy=True)
        if arr.dtype not in _ALLOWED:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._grad = None
        self._parents: tuple = ()
        self._backward = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def grad(self):
        if not self.requires_grad:
            return None
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value):
        self._grad = value

    def zero_grad(self):
        self._grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.requires_grad = False
        t._grad = None
        t._parents = ()
        t._backward = None
        t.name = None
        return t

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.shape[0]

    # -- autodiff ---------------------------------------------------------
    def backward(self, grad=None):
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.size != 1:
                raise ShapeError(f"implicit backward needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.dtype)

        order = []
        seen = set()
        stack = [(self, False)]
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

        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._grad = g.copy() if node._grad is None else node._grad + g
                continue
            pgs = node._backward(g)
            for p, pg in zip(node._parents, pgs):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                grads[key] = pg if key not in grads else grads[key] + pg

    # -- operator sugar ---------------------------------------------------
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


# ---------------------------------------------------------------------------
# graph plumbing


def _check_finite(arr: np.ndarray, op: str):
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {op}")


def make_op(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str = "op") -> Tensor:
    """Wrap ``data`` as the output of an op with the given backward closure.

    ``backward(g)`` must return one array (or None) per parent.  Used by the
    built-in ops and by kernels defined in other modules.
    """
    _check_finite(data, op)
    t = Tensor.__new__(Tensor)
    t.data = data
    t._grad = None
    t.name = None
    rg = is_grad_enabled() and any(p.requires_grad for p in parents)
    t.requires_grad = rg
    if rg:
        t._parents = tuple(parents)
        t._backward = backward
    else:
        t._parents = ()
        t._backward = None
    return t


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    arr = np.asarray(x, dtype=dtype)
    t = Tensor.__new__(Tensor)
    t.data = arr if arr.dtype in _ALLOWED else arr.astype(np.float64)
    t.requires_grad = False
    t._grad = None
    t._parents = ()
    t._backward = None
    t.name = None
    return t


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        if a.dtype != b.dtype:
            raise TypeError(f"unsupported dtype mix: {a.dtype} and {b.dtype}")
        return a, b
    if isinstance(a, Tensor):
        return a, as_tensor(b, a)
    if isinstance(b, Tensor):
        return as_tensor(a, b), b
    a = as_tensor(a)
    return a, as_tensor(b, a)


def _same_dtype(*ts: Tensor):
    d = ts[0].dtype
    for t in ts[1:]:
        if t is not None and t.dtype != d:
            raise TypeError(f"unsupported dtype mix: {d} and {t.dtype}")


def unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b)
    return make_op(a.data + b.data, (a, b),
                   lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b)
    return make_op(a.data - b.data, (a, b),
                   lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b)
    ad, bd = a.data, b.data
    return make_op(ad * bd, (a, b),
                   lambda g: (unbroadcast(g * bd, a.shape) if a.requires_grad else None,
                              unbroadcast(g * ad, b.shape) if b.requires_grad else None), "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return make_op(out, (a, b),
                   lambda g: (unbroadcast(g / bd, a.shape) if a.requires_grad else None,
                              unbroadcast(-g * out / bd, b.shape) if b.requires_grad else None), "div")


def neg(a: Tensor) -> Tensor:
    return make_op(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, p: float) -> Tensor:
    ad = a.data
    return make_op(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),), "power")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_op(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return make_op(out, (a,), lambda g: (g / ad,), "log")


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return make_op(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = _sigmoid(x)
    return make_op(x * s, (a,), lambda g: (g * (s * (1 + x * (1 - s))),), "silu")


def relu(a: Tensor) -> Tensor:
    x = a.data
    mask = x > 0
    return make_op(np.where(mask, x, 0).astype(x.dtype), (a,), lambda g: (g * mask,), "relu")


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.logaddexp(0, x).astype(x.dtype)
    return make_op(out, (a,), lambda g: (g * _sigmoid(x),), "softplus")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_op(out, (a,), back, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))
    out = x - lse

    def back(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_op(out, (a,), back, "log_softmax")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands: {a.shape} vs {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), a.shape) if a.requires_grad else None
        gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return make_op(ad @ bd, (a, b), back, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Dense layer over the last axis: ``x @ weight.T + bias``."""
    _same_dtype(x, weight, bias)
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"shape mismatch: input {x.shape} vs weight {weight.shape}")
    xd, wd = x.data, weight.data
    lead = xd.shape[:-1]
    x2 = xd.reshape(-1, xd.shape[-1])
    out = x2 @ wd.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(lead + (wd.shape[0],))

    def back(g):
        g2 = g.reshape(-1, wd.shape[0])
        gx = (g2 @ wd).reshape(xd.shape) if x.requires_grad else None
        gw = g2.T @ x2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_op(out, parents, back, "linear")


# ---------------------------------------------------------------------------
# reductions and shape ops


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = a.data
    out = np.asarray(x.sum(axis=axis, keepdims=keepdims), dtype=x.dtype)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_op(out, (a,), back, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = a.data
    n = x.size if axis is None else int(np.prod([x.shape[i] for i in np.atleast_1d(axis)]))
    out = np.asarray(x.mean(axis=axis, keepdims=keepdims), dtype=x.dtype)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return make_op(out, (a,), back, "mean")


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {src} into {shape}") from None
    return make_op(out, (a,), lambda g: (g.reshape(src),), "reshape")


def permute(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return make_op(out, (a,), lambda g: (np.ascontiguousarray(g.transpose(inv)),), "permute")


def flip(a: Tensor, axis: int) -> Tensor:
    out = np.ascontiguousarray(np.flip(a.data, axis))
    return make_op(out, (a,), lambda g: (np.ascontiguousarray(np.flip(g, axis)),), "flip")


def shift(a: Tensor, axis: int = 0) -> Tensor:
    """Move every entry one step later along ``axis``; zero enters at index 0."""
    x = a.data
    axis = axis % x.ndim
    out = np.zeros_like(x)
    dst = [slice(None)] * x.ndim
    src = [slice(None)] * x.ndim
    dst[axis] = slice(1, None)
    src[axis] = slice(None, -1)
    out[tuple(dst)] = x[tuple(src)]

    def back(g):
        gx = np.zeros_like(g)
        gx[tuple(src)] = g[tuple(dst)]
        return (gx,)

    return make_op(out, (a,), back, "shift")


def unshift(a: Tensor, axis: int = 0) -> Tensor:
    """Inverse direction of :func:`shift`: one step earlier, zero at the end."""
    x = a.data
    axis = axis % x.ndim
    out = np.zeros_like(x)
    dst = [slice(None)] * x.ndim
    src = [slice(None)] * x.ndim
    dst[axis] = slice(None, -1)
    src[axis] = slice(1, None)
    out[tuple(dst)] = x[tuple(src)]

    def back(g):
        gx = np.zeros_like(g)
        gx[tuple(src)] = g[tuple(dst)]
        return (gx,)

    return make_op(out, (a,), back, "unshift")


def roll(a: Tensor, shifts, axes) -> Tensor:
    out = np.roll(a.data, shifts, axes)
    neg_shifts = tuple(-s for s in shifts) if isinstance(shifts, (tuple, list)) else -shifts
    return make_op(out, (a,), lambda g: (np.roll(g, neg_shifts, axes),), "roll")


def pad(a: Tensor, widths) -> Tensor:
    """Zero padding; ``widths`` as for ``np.pad``."""
    widths = [tuple(w) for w in widths]
    out = np.pad(a.data, widths)
    crop = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, a.shape))
    return make_op(out, (a,), lambda g: (np.ascontiguousarray(g[crop]),), "pad")


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


def getitem(a: Tensor, idx) -> Tensor:
    x = a.data
    out = np.array(x[idx], copy=True)
    basic = _is_basic_index(idx)

    def back(g):
        gx = np.zeros_like(x)
        if basic:
            gx[idx] += g
        else:
            np.add.at(gx, idx, g)
        return (gx,)

    return make_op(out, (a,), back, "slice")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    _same_dtype(*tensors)
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"shape mismatch in concat: {ref} vs {t.shape}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def back(g):
        res = []
        for i in range(len(tensors)):
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(bounds[i], bounds[i + 1])
            res.append(np.ascontiguousarray(g[tuple(sl)]))
        return res

    return make_op(out, tensors, back, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return concat([reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors], axis)


# ---------------------------------------------------------------------------
# normalisation


def layer_norm(a: Tensor, weight: Tensor, bias: Tensor, axis: int = 0, eps: float = 1e-5) -> Tensor:
    """Normalise over ``axis`` (the channel axis) with a per-channel affine."""
    _same_dtype(a, weight, bias)
    x = a.data
    axis = axis % x.ndim
    if weight.shape != (x.shape[axis],):
        raise ShapeError(f"shape mismatch: input {x.shape} channel axis {axis} vs weight {weight.shape}")
    bshape = [1] * x.ndim
    bshape[axis] = x.shape[axis]
    mu = x.mean(axis=axis, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    w = weight.data.reshape(bshape)
    out = xhat * w + bias.data.reshape(bshape)
    others = tuple(i for i in range(x.ndim) if i != axis)

    def back(g):
        gx = None
        if a.requires_grad:
            gh = g * w
            gx = inv * (gh - gh.mean(axis=axis, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=axis, keepdims=True))
        return gx, (g * xhat).sum(axis=others), g.sum(axis=others)

    return make_op(out.astype(x.dtype), (a, weight, bias), back, "layer_norm")


def instance_norm(a: Tensor, weight: Tensor | None = None, bias: Tensor | None = None,
                  eps: float = 1e-5) -> Tensor:
    """Per-channel normalisation over the spatial axes of a (C, ...) map."""
    _same_dtype(a, weight, bias)
    x = a.data
    C = x.shape[0]
    sp = tuple(range(1, x.ndim))
    bshape = (C,) + (1,) * (x.ndim - 1)
    mu = x.mean(axis=sp, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=sp, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    w = weight.data.reshape(bshape) if weight is not None else 1.0
    out = xhat * w
    if bias is not None:
        out = out + bias.data.reshape(bshape)

    def back(g):
        gx = None
        if a.requires_grad:
            gh = g * w
            gx = inv * (gh - gh.mean(axis=sp, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=sp, keepdims=True))
        res = [gx]
        if weight is not None:
            res.append((g * xhat).sum(axis=sp))
        if bias is not None:
            res.append(g.sum(axis=sp))
        return res

    parents = [a] + [t for t in (weight, bias) if t is not None]
    return make_op(out.astype(x.dtype), parents, back, "instance_norm")


# ---------------------------------------------------------------------------
# 3-D convolution


def _triple(v) -> tuple:
    if isinstance(v, (tuple, list)):
        if len(v) != 3:
            raise ValueError(f"expected 3 values, got {v}")
        return tuple(int(i) for i in v)
    return (int(v),) * 3


def _out_extent(n, k, s, p):
    return (n + 2 * p - k) // s + 1


def _im2col(xp: np.ndarray, k: tuple, s: tuple, out: tuple) -> np.ndarray:
    """(C, Dp, Hp, Wp) -> (C*kd*kh*kw, Do*Ho*Wo)."""
    C = xp.shape[0]
    win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=(1, 2, 3))
    win = win[:, : s[0] * (out[0] - 1) + 1: s[0], : s[1] * (out[1] - 1) + 1: s[1], : s[2] * (out[2] - 1) + 1: s[2]]
    cols = np.ascontiguousarray(win.transpose(0, 4, 5, 6, 1, 2, 3))
    return cols.reshape(C * k[0] * k[1] * k[2], out[0] * out[1] * out[2])


def _col2im(cols: np.ndarray, C: int, padded: tuple, k: tuple, s: tuple, out: tuple) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add columns into a padded volume."""
    buf = np.zeros((C,) + padded, dtype=cols.dtype)
    c6 = cols.reshape((C,) + k + out)
    for a in range(k[0]):
        for b in range(k[1]):
            for c in range(k[2]):
                buf[:, a: a + s[0] * (out[0] - 1) + 1: s[0],
                    b: b + s[1] * (out[1] - 1) + 1: s[1],
                    c: c + s[2] * (out[2] - 1) + 1: s[2]] += c6[:, a, b, c]
    return buf


def _tap_view(xp, a, b, c, s, out):
    return xp[:, a: a + s[0] * (out[0] - 1) + 1: s[0],
              b: b + s[1] * (out[1] - 1) + 1: s[1],
              c: c + s[2] * (out[2] - 1) + 1: s[2]]


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0,
           groups: int = 1) -> Tensor:
    """3-D cross-correlation of a (Cin, D, H, W) map with a (Cout, Cin/groups, kd, kh, kw) kernel."""
    _same_dtype(x, weight, bias)
    if x.ndim != 4 or weight.ndim != 5:
        raise ShapeError(f"conv3d expects (C,D,H,W) input and 5-d weight, got {x.shape} and {weight.shape}")
    Cin = x.shape[0]
    Cout, cpg = weight.shape[:2]
    k = weight.shape[2:]
    s, p = _triple(stride), _triple(padding)
    if Cin % groups or Cout % groups or cpg != Cin // groups:
        raise ShapeError(f"shape mismatch: input {x.shape} vs weight {weight.shape} with groups={groups}")
    out_sp = tuple(_out_extent(x.shape[i + 1], k[i], s[i], p[i]) for i in range(3))
    if min(out_sp) < 1:
        raise ShapeError(f"conv3d output would be empty for input {x.shape}, kernel {k}")
    xp = np.pad(x.data, ((0, 0),) + tuple((pi, pi) for pi in p)) if any(p) else x.data
    wd = weight.data
    depthwise = groups == Cin and Cout == Cin and cpg == 1
    P = out_sp[0] * out_sp[1] * out_sp[2]

    if depthwise:
        out = np.zeros((Cout,) + out_sp, dtype=x.dtype)
        for a in range(k[0]):
            for b in range(k[1]):
                for c in range(k[2]):
                    out += wd[:, 0, a, b, c, None, None, None] * _tap_view(xp, a, b, c, s, out_sp)
        cols = None
    else:
        cols = _im2col(xp, k, s, out_sp)
        g_in = cpg * k[0] * k[1] * k[2]
        if groups == 1:
            out = (wd.reshape(Cout, -1) @ cols).reshape((Cout,) + out_sp)
        else:
            w3 = wd.reshape(groups, Cout // groups, g_in)
            c3 = cols.reshape(groups, g_in, P)
            out = np.matmul(w3, c3).reshape((Cout,) + out_sp)
    if bias is not None:
        out = out + bias.data[:, None, None, None]

    def back(g):
        gx = gw = None
        if depthwise:
            if x.requires_grad:
                gxp = np.zeros_like(xp)
            if weight.requires_grad:
                gw = np.zeros_like(wd)
            for a in range(k[0]):
                for b in range(k[1]):
                    for c in range(k[2]):
                        if weight.requires_grad:
                            gw[:, 0, a, b, c] = np.einsum("cdhw,cdhw->c", g, _tap_view(xp, a, b, c, s, out_sp))
                        if x.requires_grad:
                            _tap_view(gxp, a, b, c, s, out_sp)[...] += wd[:, 0, a, b, c, None, None, None] * g
        else:
            g2 = g.reshape(Cout, P)
            if groups == 1:
                w2 = wd.reshape(Cout, -1)
                if weight.requires_grad:
                    gw = (g2 @ cols.T).reshape(wd.shape)
                if x.requires_grad:
                    gcols = w2.T @ g2
            else:
                g_in = cpg * k[0] * k[1] * k[2]
                w3 = wd.reshape(groups, Cout // groups, g_in)
                c3 = cols.reshape(groups, g_in, P)
                g3 = g2.reshape(groups, Cout // groups, P)
                if weight.requires_grad:
                    gw = np.matmul(g3, c3.transpose(0, 2, 1)).reshape(wd.shape)
                if x.requires_grad:
                    gcols = np.matmul(w3.transpose(0, 2, 1), g3).reshape(-1, P)
            if x.requires_grad:
                gxp = _col2im(gcols, Cin, xp.shape[1:], k, s, out_sp)
        if x.requires_grad:
            if any(p):
                gx = np.ascontiguousarray(gxp[:, p[0]: gxp.shape[1] - p[0], p[1]: gxp.shape[2] - p[1],
                                              p[2]: gxp.shape[3] - p[2]])
            else:
                gx = gxp
        res = [gx, gw]
        if bias is not None:
            res.append(g.sum(axis=(1, 2, 3)))
        return res

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_op(out, parents, back, "conv3d")


def conv_transpose3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=2, padding=0,
                     output_padding=0) -> Tensor:
    """Transposed 3-D convolution; ``weight`` is (Cin, Cout, kd, kh, kw)."""
    _same_dtype(x, weight, bias)
    if x.ndim != 4 or weight.ndim != 5 or weight.shape[0] != x.shape[0]:
        raise ShapeError(f"shape mismatch: input {x.shape} vs weight {weight.shape}")
    Cin = x.shape[0]
    Cout = weight.shape[1]
    k = weight.shape[2:]
    s, p, op = _triple(stride), _triple(padding), _triple(output_padding)
    in_sp = x.shape[1:]
    full = tuple((in_sp[i] - 1) * s[i] + k[i] + op[i] for i in range(3))
    out_sp = tuple(full[i] - 2 * p[i] for i in range(3))
    if min(out_sp) < 1:
        raise ShapeError(f"conv_transpose3d output would be empty for input {x.shape}")
    P = in_sp[0] * in_sp[1] * in_sp[2]
    x2 = x.data.reshape(Cin, P)
    w2 = weight.data.reshape(Cin, -1)
    cols = w2.T @ x2
    buf = _col2im(cols, Cout, full, k, s, in_sp)
    crop = (slice(None),) + tuple(slice(p[i], p[i] + out_sp[i]) for i in range(3))
    out = np.ascontiguousarray(buf[crop])
    if bias is not None:
        out = out + bias.data[:, None, None, None]

    def back(g):
        gfull = np.zeros((Cout,) + full, dtype=g.dtype)
        gfull[crop] = g
        gcols = _im2col(gfull, k, s, in_sp)
        gx = (w2 @ gcols).reshape(x.shape) if x.requires_grad else None
        gw = (x2 @ gcols.T).reshape(weight.shape) if weight.requires_grad else None
        res = [gx, gw]
        if bias is not None:
            res.append(g.sum(axis=(1, 2, 3)))
        return res

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_op(out, parents, back, "conv_transpose3d")


def conv3d_reference(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None, stride=1, padding=0,
                     groups: int = 1) -> np.ndarray:
    """Direct loop over output voxels; the baseline the fast paths are tested against."""
    s, p = _triple(stride), _triple(padding)
    Cin = x.shape[0]
    Cout, cpg = w.shape[:2]
    k = w.shape[2:]
    xp = np.pad(x, ((0, 0),) + tuple((pi, pi) for pi in p))
    out_sp = tuple(_out_extent(x.shape[i + 1], k[i], s[i], p[i]) for i in range(3))
    out = np.zeros((Cout,) + out_sp, dtype=x.dtype)
    opg = Cout // groups
    for o in range(Cout):
        gi = o // opg
        xs = xp[gi * cpg:(gi + 1) * cpg]
        for i in range(out_sp[0]):
            for j in range(out_sp[1]):
                for l in range(out_sp[2]):
                    patch = xs[:, i * s[0]: i * s[0] + k[0], j * s[1]: j * s[1] + k[1], l * s[2]: l * s[2] + k[2]]
                    acc = 0.0
                    for v in (patch * w[o]).ravel():
                        acc += v
                    out[o, i, j, l] = acc + (b[o] if b is not None else 0.0)
    return out


# ---------------------------------------------------------------------------
# catalogue and verification


def op_set() -> dict[str, Callable]:
    """Every differentiable primitive, keyed by name."""
    return {
        "add": add, "sub": sub, "mul": mul, "div": div, "neg": neg, "power": power,
        "exp": exp, "log": log, "matmul": matmul, "linear": linear,
        "conv3d": conv3d, "conv_transpose3d": conv_transpose3d,
        "sigmoid": sigmoid, "silu": silu, "relu": relu, "softplus": softplus,
        "softmax": softmax, "log_softmax": log_softmax,
        "layer_norm": layer_norm, "instance_norm": instance_norm,
        "mean": mean, "sum": tsum, "concat": concat, "stack": stack, "reshape": reshape,
        "permute": permute, "flip": flip, "shift": shift, "unshift": unshift, "roll": roll,
        "pad": pad, "slice": getitem,
    }


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-6,
               indices: Iterable[tuple] | None = None) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |central difference|).

    ``indices`` restricts the check to a subset of coordinates of ``x`` (all by default).
    """
    if not x.requires_grad:
        x.requires_grad = True
    x.zero_grad()
    y = f(x)
    if y.size != 1:
        raise ShapeError(f"grad_check needs a scalar-valued function, got shape {y.shape}")
    y.backward()
    analytic = x.grad.copy()
    if indices is None:
        indices = list(np.ndindex(*x.shape))
    worst = 0.0
    with no_grad():
        for idx in indices:
            idx = tuple(int(i) for i in idx)
            orig = x.data[idx]
            x.data[idx] = orig + eps
            fp = f(x).item()
            x.data[idx] = orig - eps
            fm = f(x).item()
            x.data[idx] = orig
            fd = (fp - fm) / (2 * eps)
            err = abs(analytic[idx] - fd) / max(1.0, abs(fd))
            worst = max(worst, err)
    x.zero_grad()
    return worst
