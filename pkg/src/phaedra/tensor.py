"""Dense tensors with reverse-mode automatic differentiation.

Only the operations needed by the autoencoder, the quantizers and the
training losses are provided. Arrays are plain numpy arrays; every
differentiable operation records a node holding its parents and a backward
closure. Nodes carry a monotonically increasing sequence number, so sorting
the reachable nodes by that number in descending order is a reverse
topological order of the graph, and a cycle cannot be constructed.

Activations are exposed in ``N x C x H x W`` order. Convolutions produce
results whose memory is channel-last, which keeps the im2col copies cheap;
numpy ufuncs preserve that layout through the elementwise ops.
"""

from __future__ import annotations

import itertools
import math
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "NonFiniteError",
    "ShapeError",
    "no_grad",
    "grad_enabled",
    "record",
    "backward",
    "grad",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "tanh",
    "silu",
    "sigmoid",
    "absolute",
    "square",
    "sum",
    "mean",
    "max_abs",
    "reshape",
    "transpose",
    "concat",
    "slice_axis",
    "matmul",
    "softmax",
    "conv2d",
    "upsample_nearest",
    "group_norm",
    "detach",
]


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


_counter = itertools.count()
_grad_enabled = True


def grad_enabled() -> bool:
    return _grad_enabled


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class _Node:
    __slots__ = ("seq", "parents", "backward", "name")

    def __init__(self, parents, backward, name):
        self.seq = next(_counter)
        self.parents = parents
        self.backward = backward
        self.name = name


class Tensor:
    """An n-dimensional array that can take part in gradient computation."""

    __slots__ = ("data", "grad", "requires_grad", "_node", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._node: _Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only defined by a python scalar")
        return scale(self, 1.0 / other)

    def backward(self) -> None:
        backward(self)


def _check_finite(arr: np.ndarray, name: str) -> None:
    # a single reduction is cheaper than isfinite().all() and catches both NaN and Inf
    if arr.size and not math.isfinite(float(np.add.reduce(arr, axis=None))):
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"{name} produced a non-finite value")


def record(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, name: str) -> Tensor:
    """Wrap ``data`` as the output of an operation on ``parents``.

    ``backward_fn(g)`` receives the gradient of the output and returns one
    gradient array (or None) per parent.
    """
    _check_finite(data, name)
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = _Node(tuple(parents), backward_fn, name)
    return out


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.broadcast_to(np.sum(g), shape).copy() if shape else np.sum(g)


def _binary_shapes(a: Tensor, b: Tensor, name: str) -> None:
    if a.shape == b.shape or a.size == 1 and a.ndim == 0 or b.size == 1 and b.ndim == 0:
        return
    raise ShapeError(f"{name}: incompatible shapes {a.shape} and {b.shape}")


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _binary_shapes(a, b, "add")
    sa, sb = a.shape, b.shape
    return record(a.data + b.data, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)), "add")


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _binary_shapes(a, b, "sub")
    sa, sb = a.shape, b.shape
    return record(a.data - b.data, (a, b), lambda g: (_reduce_to(g, sa), -_reduce_to(g, sb)), "sub")


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _binary_shapes(a, b, "mul")
    ad, bd = a.data, b.data
    return record(
        ad * bd,
        (a, b),
        lambda g: (_reduce_to(g * bd, ad.shape), _reduce_to(g * ad, bd.shape)),
        "mul",
    )


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return record(a.data * a.dtype.type(c), (a,), lambda g: (g * c,), "scale")


def neg(a: Tensor) -> Tensor:
    return record(-a.data, (a,), lambda g: (-g,), "neg")


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return record(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)
    return record(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # the tanh form is stable for large |x| and needs no branch
    half = x.dtype.type(0.5) if x.dtype.kind == "f" else 0.5
    return half * np.tanh(half * x) + half


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = _sigmoid(x)
    y = x * s

    def back(g):
        return (g * (s * (1.0 + x * (1.0 - s))),)

    return record(y, (a,), back, "silu")


def absolute(a: Tensor) -> Tensor:
    x = a.data
    return record(np.abs(x), (a,), lambda g: (g * np.sign(x),), "abs")


def square(a: Tensor) -> Tensor:
    x = a.data
    return record(x * x, (a,), lambda g: (g * (2.0 * x),), "square")


def detach(a: Tensor) -> Tensor:
    return Tensor(a.data)


# ---------------------------------------------------------------- reductions


def _nonempty(a: Tensor, name: str) -> None:
    if a.size == 0:
        raise ShapeError(f"{name} of an empty tensor")


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors the numpy name
    _nonempty(a, "sum")
    shape, dt = a.shape, a.dtype
    return record(np.asarray(a.data.sum(), dtype=dt), (a,), lambda g: (np.full(shape, g, dtype=dt),), "sum")


def mean(a: Tensor) -> Tensor:
    _nonempty(a, "mean")
    shape, dt, n = a.shape, a.dtype, a.size
    return record(
        np.asarray(a.data.mean(), dtype=dt), (a,), lambda g: (np.full(shape, g / n, dtype=dt),), "mean"
    )


def max_abs(a: Tensor) -> Tensor:
    """Largest absolute value; the gradient goes to the first arg-max element."""
    _nonempty(a, "max_abs")
    flat = a.data.reshape(-1)
    idx = int(np.argmax(np.abs(flat)))
    val = flat[idx]
    shape, dt = a.shape, a.dtype

    def back(g):
        out = np.zeros(flat.shape, dtype=dt)
        out[idx] = g * np.sign(val)
        return (out.reshape(shape),)

    return record(np.asarray(abs(val), dtype=dt), (a,), back, "max_abs")


# ---------------------------------------------------------------- shape ops


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return record(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        index = [slice(None)] * g.ndim
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            index[axis] = slice(int(lo), int(hi))
            out.append(g[tuple(index)])
        return tuple(out)

    return record(np.concatenate([t.data for t in tensors], axis=axis), tensors, back, "concat")


def slice_axis(a: Tensor, start: int, stop: int, axis: int = 1) -> Tensor:
    """Contiguous slice ``[start, stop)`` along one axis."""
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    shape, dt = a.shape, a.dtype

    def back(g):
        out = np.zeros(shape, dtype=dt)
        out[index] = g
        return (out,)

    return record(a.data[index], (a,), back, "slice")


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes (equal batch shapes)."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        return (g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g)

    return record(ad @ bd, (a, b), back, "matmul")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return record(y, (a,), back, "softmax")


def _batched(x: np.ndarray, ndim: int = 4) -> tuple[np.ndarray, bool]:
    if x.ndim == ndim - 1:
        return x[None], True
    if x.ndim != ndim:
        raise ShapeError(f"expected a {ndim - 1}d or {ndim}d tensor, got shape {x.shape}")
    return x, False


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2D cross-correlation of ``C_in x H x W`` (optionally batched) input.

    Output extent is ``(H + 2*padding - k) // stride + 1``.
    """
    X, squeeze = _batched(x.data)
    if weight.ndim != 4:
        raise ShapeError(f"conv2d: weight must be 4d, got {weight.shape}")
    n, c, h, w = X.shape
    co, ci, k, k2 = weight.shape
    if ci != c or k != k2:
        raise ShapeError(f"conv2d: input {X.shape} does not match weight {weight.shape}")
    if k % 2 == 0:
        raise ShapeError("conv2d: kernel size must be odd")
    if padding < 0 or stride < 1:
        raise ValueError("conv2d: padding must be >= 0 and stride >= 1")
    if bias is not None and bias.shape != (co,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {co} output channels")
    if h + 2 * padding < k or w + 2 * padding < k:
        raise ShapeError(f"conv2d: input {h}x{w} smaller than kernel {k}")
    if k == 1 and stride == 1 and padding == 0:
        impl = _conv_pointwise
    elif stride == 1:
        impl = _conv_shifted
    else:
        impl = _conv_im2col
    # activations live channel-last in memory; the NCHW arrays are transposed views
    y, back_nhwc = impl(X.transpose(0, 2, 3, 1), weight.data, None if bias is None else bias.data, stride, padding)
    y = y.transpose(0, 3, 1, 2)
    if squeeze:
        y = y[0]

    def back(g):
        gb = g[None] if squeeze else g
        gx, gw, gbias = back_nhwc(gb.transpose(0, 2, 3, 1))
        gx = gx.transpose(0, 3, 1, 2)
        if squeeze:
            gx = gx[0]
        return (gx, gw, gbias) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return record(y, parents, back, "conv2d")


def _conv_pointwise(xh, wt, b, stride, padding):
    n, h, w, c = xh.shape
    co = wt.shape[0]
    cols = np.ascontiguousarray(xh).reshape(n * h * w, c)
    wm = wt.reshape(co, c).T
    out = cols @ wm
    if b is not None:
        out += b

    def back(g):
        gm = np.ascontiguousarray(g).reshape(n * h * w, co)
        gw = (cols.T @ gm).T.reshape(co, c, 1, 1)
        gx = (gm @ wm.T).reshape(n, h, w, c)
        return gx, gw, gm.sum(axis=0) if b is not None else None

    return out.reshape(n, h, w, co), back


def _conv_shifted(xh, wt, b, stride, padding):
    # Flatten the zero-padded batch into rows; the tap (i, j) of every output
    # position then reads the contiguous row block shifted by i*wp + j, so each
    # tap is one GEMM on a view. Rows landing in the padding are discarded.
    n, h, w, c = xh.shape
    co, _, k, _ = wt.shape
    p = padding
    hp, wp = h + 2 * p, w + 2 * p
    ho, wo = hp - k + 1, wp - k + 1
    rows = n * hp * wp
    tail = (k - 1) * wp + (k - 1)
    dt = xh.dtype
    xp = np.zeros((rows + tail, c), dtype=dt)
    xp[:rows].reshape(n, hp, wp, c)[:, p : p + h, p : p + w] = xh
    taps = np.ascontiguousarray(wt.transpose(2, 3, 1, 0))  # k x k x c x co
    offsets = [(i, j, i * wp + j) for i in range(k) for j in range(k)]
    out = np.empty((rows, co), dtype=dt)
    tmp = np.empty((rows, co), dtype=dt)
    first = True
    for i, j, o in offsets:
        if first:
            np.matmul(xp[o : o + rows], taps[i, j], out=out)
            first = False
        else:
            np.matmul(xp[o : o + rows], taps[i, j], out=tmp)
            out += tmp
    if b is not None:
        out += b
    y = out.reshape(n, hp, wp, co)[:, :ho, :wo]

    def back(g):
        gfull = np.zeros((rows, co), dtype=dt)
        gfull.reshape(n, hp, wp, co)[:, :ho, :wo] = g
        gw = np.empty((k, k, c, co), dtype=dt)
        gxp = np.zeros((rows + tail, c), dtype=dt)
        tmpx = np.empty((rows, c), dtype=dt)
        for i, j, o in offsets:
            np.matmul(xp[o : o + rows].T, gfull, out=gw[i, j])
            np.matmul(gfull, taps[i, j].T, out=tmpx)
            gxp[o : o + rows] += tmpx
        gx = gxp[:rows].reshape(n, hp, wp, c)[:, p : p + h, p : p + w]
        gbias = gfull.sum(axis=0) if b is not None else None
        return gx, gw.transpose(3, 2, 0, 1), gbias

    return y, back


def _conv_im2col(xh, wt, b, s, padding):
    n, h, w, c = xh.shape
    co, _, k, _ = wt.shape
    ho = (h + 2 * padding - k) // s + 1
    wo = (w + 2 * padding - k) // s + 1
    dt = xh.dtype
    xp = np.pad(xh, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else xh
    cols = np.empty((n, ho, wo, k, k, c), dtype=dt)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = xp[:, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s, :]
    cols = cols.reshape(n * ho * wo, k * k * c)
    wm = wt.transpose(2, 3, 1, 0).reshape(k * k * c, co)
    out = cols @ wm
    if b is not None:
        out += b

    def back(g):
        gm = np.ascontiguousarray(g).reshape(n * ho * wo, co)
        gw = (cols.T @ gm).reshape(k, k, c, co).transpose(3, 2, 0, 1)
        gcols = (gm @ wm.T).reshape(n, ho, wo, k, k, c)
        gxp = np.zeros((n, h + 2 * padding, w + 2 * padding, c), dtype=dt)
        for i in range(k):
            for j in range(k):
                gxp[:, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s, :] += gcols[:, :, :, i, j, :]
        gx = gxp[:, padding : padding + h, padding : padding + w, :]
        return gx, gw, gm.sum(axis=0) if b is not None else None

    return out.reshape(n, ho, wo, co), back


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Replicate each element of a ``C x H x W`` map into a factor x factor block."""
    if factor < 1:
        raise ValueError("upsample_nearest: factor must be >= 1")
    X, squeeze = _batched(x.data)
    if factor == 1:
        return record(x.data.copy(), (x,), lambda g: (g,), "upsample")
    n, c, h, w = X.shape
    f = factor
    y = np.broadcast_to(X[:, :, :, None, :, None], (n, c, h, f, w, f)).reshape(n, c, h * f, w * f)
    if squeeze:
        y = y[0]

    def back(g):
        gb = g[None] if squeeze else g
        gx = gb.reshape(n, c, h, f, w, f).sum(axis=(3, 5))
        return (gx[0] if squeeze else gx,)

    return record(y, (x,), back, "upsample")


def group_norm(x: Tensor, num_groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Group normalization over (channels-in-group, H, W) with per-channel affine."""
    X, squeeze = _batched(x.data)
    n, c, h, w = X.shape
    if c % num_groups:
        raise ShapeError(f"group_norm: {c} channels not divisible into {num_groups} groups")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError("group_norm: affine parameters must have one entry per channel")
    gsize = c // num_groups
    cnt = h * w * gsize

    # channel-last (n, h*w, c); reductions over rows first, then within groups
    def group_mean(a):
        per_channel = a.sum(axis=1)
        return (per_channel.reshape(n, num_groups, gsize).sum(axis=2) / cnt).repeat(gsize, axis=1)[:, None, :]

    xg = np.ascontiguousarray(X.transpose(0, 2, 3, 1)).reshape(n, h * w, c)
    xc = xg - group_mean(xg)
    var = group_mean(np.square(xc))
    rstd = (1.0 / np.sqrt(var + eps)).astype(X.dtype)
    xhat = xc * rstd
    gm = gamma.data
    y = (xhat * gm + beta.data).reshape(n, h, w, c).transpose(0, 3, 1, 2)
    if squeeze:
        y = y[0]

    def back(g):
        gb = g[None] if squeeze else g
        gg = np.ascontiguousarray(gb.transpose(0, 2, 3, 1)).reshape(n, h * w, c)
        gbeta_n = gg.sum(axis=1)
        prod = gg * xhat
        ggamma_n = prod.sum(axis=1)
        gxh = gg * gm
        m1 = _group_mean_from_channels(gbeta_n * gm, num_groups, cnt)
        m2 = _group_mean_from_channels(ggamma_n * gm, num_groups, cnt)
        gx = (rstd * (gxh - m1 - xhat * m2)).reshape(n, h, w, c).transpose(0, 3, 1, 2)
        return (gx[0] if squeeze else gx, ggamma_n.sum(axis=0), gbeta_n.sum(axis=0))

    return record(y, (x, gamma, beta), back, "group_norm")


def _group_mean_from_channels(per_channel: np.ndarray, num_groups: int, cnt: int) -> np.ndarray:
    n, c = per_channel.shape
    gsize = c // num_groups
    return (per_channel.reshape(n, num_groups, gsize).sum(axis=2) / cnt).repeat(gsize, axis=1)[:, None, :]


# ---------------------------------------------------------------- backward


def _reachable(root: Tensor) -> list[Tensor]:
    seen: set[int] = set()
    order: list[Tensor] = []
    stack = [root]
    while stack:
        t = stack.pop()
        if t._node is None or id(t) in seen:
            continue
        seen.add(id(t))
        order.append(t)
        stack.extend(p for p in t._node.parents if p is not None and p.requires_grad)
    order.sort(key=lambda t: t._node.seq, reverse=True)
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if loss._node is None:
        loss.grad = np.ones(loss.shape, dtype=loss.dtype) if loss.grad is None else loss.grad + 1
        return
    pending: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    for t in _reachable(loss):
        g = pending.pop(id(t), None)
        if g is None:
            continue
        grads = t._node.backward(g)
        for p, gp in zip(t._node.parents, grads):
            if p is None or gp is None or not p.requires_grad:
                continue
            if p._node is None:
                p.grad = gp.astype(p.dtype, copy=True) if p.grad is None else p.grad + gp
            else:
                key = id(p)
                pending[key] = gp if key not in pending else pending[key] + gp


def grad(loss: Tensor, params: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of ``loss`` w.r.t. ``params``; unreachable parameters get zeros."""
    params = list(params)
    saved = [p.grad for p in params]
    for p in params:
        p.grad = None
    backward(loss)
    out = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    for p, s in zip(params, saved):
        p.grad = s
    return out
