"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every operation returns a new :class:`Tensor`.  When at least one input
requires a gradient, the output keeps a reference to its inputs and a
closure computing the vector-Jacobian product.  Tensor ids come from a
monotonically increasing counter, so sorting the reachable nodes by id is
a valid topological order (the "tape").
"""

from __future__ import annotations

import itertools
import threading
import zlib
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import ContractError, DimensionError, NumericError

_ids = itertools.count()
_state = threading.local()


def default_dtype():
    return getattr(_state, "dtype", np.float64)


def grad_enabled() -> bool:
    return getattr(_state, "grad", True)


@contextmanager
def precision(dtype):
    """Create new tensors in ``dtype`` within this thread (float64 outside)."""
    prev = default_dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


@contextmanager
def no_grad():
    """Skip recording within this thread; outputs never require gradients."""
    prev = grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


@contextmanager
def record_branches():
    """Collect a checksum of every relu / max-pool selection pattern computed in this thread.

    Two forward passes took the same piecewise-linear branch exactly when
    their lists are equal; :func:`grad_check` uses this to keep central
    differences from straddling a kink.
    """
    prev = getattr(_state, "branches", None)
    _state.branches = out = []
    try:
        yield out
    finally:
        _state.branches = prev


def _record(*masks: np.ndarray) -> None:
    log = getattr(_state, "branches", None)
    if log is not None:
        log.append(tuple(zlib.crc32(np.packbits(m).tobytes()) for m in masks))


class Tensor:
    """An n-mode float array that can take part in differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "id", "kind", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=default_dtype(), order="C")
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.id = next(_ids)
        self.kind = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, kind={self.kind}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(kind: str, out: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    if not np.all(np.isfinite(out)):
        raise NumericError(f"{kind}: non-finite value in output of shape {out.shape}")
    t = Tensor(out)
    t.kind = kind
    if grad_enabled() and any(x.requires_grad for x in inputs):
        t.requires_grad = True
        t._parents = tuple(inputs)
        t._backward = backward_fn
    return t


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(kind: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{kind}: incompatible extents {a.shape} and {b.shape}") from None


# elementwise binary -------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _make("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scalar_mul(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make("scalar_mul", x.data * c, (x,), lambda g: (g * c,))


# elementwise unary --------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)
    _record(out > 0)
    return _make("relu", out, (x,), lambda g: (np.where(out > 0, g, 0.0),))


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _make("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise NumericError("log: non-positive input")
    return _make("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def reciprocal(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore"):
        out = 1.0 / x.data
    return _make("reciprocal", out, (x,), lambda g: (-g * out * out,))


def square(x: Tensor) -> Tensor:
    return _make("square", x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def sigmoid(x: Tensor) -> Tensor:
    out = expit(x.data)
    return _make("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


# reductions and shape -----------------------------------------------------


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make("sum", np.asarray(out), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes]))
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _make("mean", np.asarray(out), (x,), backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None
    return _make("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def vectorize(x: Tensor, keep: int = 0) -> Tensor:
    """Flatten every mode after the first ``keep`` ones (row-major)."""
    return reshape(x, x.shape[:keep] + (-1,))


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim))[::-1]
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"transpose: axes {axes} do not permute {x.ndim} modes")
    inverse = tuple(np.argsort(axes))
    return _make("transpose", x.data.transpose(axes), (x,),
                 lambda g: (np.ascontiguousarray(g.transpose(inverse)),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    axis = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != axis):
            raise DimensionError(f"concat: extents {ref} and {t.shape} differ off axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _make("concat", out, tensors, backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: extents {a.shape} and {b.shape} do not chain")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make("matmul", out, (a, b), backward)


# spatial ------------------------------------------------------------------


def _im2col(x: np.ndarray, k: int, stride: int, pad: int) -> tuple[np.ndarray, int, int]:
    """Patch matrix laid out (N, C*k*k, Ho*Wo) so a left-multiply yields NCHW output."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * k * k, ho * wo)
    return cols, ho, wo


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (N,C,H,W) with ``w`` (O,C,k,k), optional bias (O,)."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1] or w.shape[2] != w.shape[3]:
        raise DimensionError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise DimensionError(f"conv2d: bias {b.shape} does not match {w.shape[0]} output channels")
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    if h + 2 * pad < k or wd + 2 * pad < k:
        raise DimensionError(f"conv2d: kernel {k} larger than padded input {x.shape}")
    cols, ho, wo = _im2col(x.data, k, stride, pad)
    w2 = w.data.reshape(o, -1)
    out = np.matmul(w2, cols)
    if b is not None:
        out += b.data[:, None]
    out = out.reshape(n, o, ho, wo)
    inputs = (x, w) if b is None else (x, w, b)

    def backward(g):
        g2 = g.reshape(n, o, ho * wo)
        gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        gcols = np.matmul(w2.T, g2).reshape(n, c, k, k, ho, wo)
        gx = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                gx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, :, i, j]
        if pad:
            gx = gx[:, :, pad:-pad, pad:-pad]
        grads = (np.ascontiguousarray(gx), gw)
        if b is not None:
            grads += (g2.sum(axis=(0, 2)),)
        return grads

    return _make("conv2d", out, inputs, backward)


def _check_pool(kind: str, x: Tensor, k: int) -> None:
    if x.ndim < 2 or x.shape[-1] % k or x.shape[-2] % k:
        raise DimensionError(f"{kind}: spatial extents {x.shape[-2:]} not divisible by {k}")


def maxpool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling over the last two modes; ties go to the first row-major index."""
    _check_pool("maxpool2x2", x, 2)
    d = x.data
    p00, p01, p10, p11 = d[..., 0::2, 0::2], d[..., 0::2, 1::2], d[..., 1::2, 0::2], d[..., 1::2, 1::2]
    # a later quadrant wins only when strictly greater
    right_top = p01 > p00
    right_bot = p11 > p10
    top = np.maximum(p00, p01)
    bot = np.maximum(p10, p11)
    lower = bot > top
    out = np.where(lower, bot, top)
    _record(right_top, right_bot, lower)

    def backward(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        g_top = np.where(lower, 0.0, g)
        g_bot = np.where(lower, g, 0.0)
        gx[..., 0::2, 0::2] = np.where(right_top, 0.0, g_top)
        gx[..., 0::2, 1::2] = np.where(right_top, g_top, 0.0)
        gx[..., 1::2, 0::2] = np.where(right_bot, 0.0, g_bot)
        gx[..., 1::2, 1::2] = np.where(right_bot, g_bot, 0.0)
        return (gx,)

    return _make("maxpool2x2", out, (x,), backward)


def avgpool(x: Tensor, k: int) -> Tensor:
    """Non-overlapping k x k average pooling over the last two modes."""
    _check_pool("avgpool", x, k)
    *lead, h, w = x.shape
    out = x.data.reshape(*lead, h // k, k, w // k, k).mean(axis=(-3, -1))

    def backward(g):
        g = np.repeat(np.repeat(g / (k * k), k, axis=-2), k, axis=-1)
        return (g,)

    return _make("avgpool", out, (x,), backward)


def upsample_nearest(x: Tensor, f: int) -> Tensor:
    """Nearest-neighbour upsampling of the last two modes by an integer factor."""
    if x.ndim < 2 or f < 1:
        raise DimensionError(f"upsample_nearest: bad input {x.shape} or factor {f}")
    out = np.repeat(np.repeat(x.data, f, axis=-2), f, axis=-1)
    *lead, h, w = x.shape

    def backward(g):
        return (g.reshape(*lead, h, f, w, f).sum(axis=(-3, -1)),)

    return _make("upsample_nearest", out, (x,), backward)


OPS: dict[str, Callable[..., Tensor]] = {
    "conv2d": conv2d,
    "relu": relu,
    "maxpool2x2": maxpool2x2,
    "avgpool": avgpool,
    "upsample_nearest": upsample_nearest,
    "matmul": matmul,
    "transpose": transpose,
    "concat": lambda *xs, axis=0: concat(xs, axis=axis),
    "add": add,
    "sub": sub,
    "mul": mul,
    "scalar_mul": scalar_mul,
    "exp": exp,
    "log": log,
    "reciprocal": reciprocal,
    "mean": mean,
    "sum": sum,
    "square": square,
    "sigmoid": sigmoid,
    "vectorize": vectorize,
    "reshape": reshape,
}


def op_forward(kind: str, inputs: Sequence[Tensor], attrs: dict | None = None) -> Tensor:
    """Dispatch an operation by name; ``attrs`` become keyword arguments."""
    try:
        fn = OPS[kind]
    except KeyError:
        raise ContractError(f"unknown operation kind {kind!r}") from None
    return fn(*inputs, **(attrs or {}))


# backward -----------------------------------------------------------------


def _tape(root: Tensor) -> list[Tensor]:
    seen: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        t = stack.pop()
        if t.id in seen or not t.requires_grad:
            continue
        seen[t.id] = t
        stack.extend(t._parents)
    return sorted(seen.values(), key=lambda t: t.id)


def backward(root: Tensor, wrt: Iterable[Tensor] | None = None):
    """Reverse-mode sweep from a scalar ``root``.

    Returns a dict ``{tensor id: gradient}`` for every reachable leaf that
    requires a gradient and stores the same arrays on ``leaf.grad``.  When
    ``wrt`` is given, a list of gradients aligned with it is returned
    instead, with zero arrays for leaves the root does not depend on.
    """
    if root.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    grads: dict[int, np.ndarray] = {root.id: np.ones(root.shape, dtype=root.data.dtype)}
    leaves: dict[int, np.ndarray] = {}
    for node in reversed(_tape(root)):
        g = grads.pop(node.id, None)
        if g is None:
            continue
        if node.is_leaf:
            leaves[node.id] = g
            node.grad = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            if parent.id in grads:
                grads[parent.id] = grads[parent.id] + pg
            else:
                grads[parent.id] = pg
    if wrt is None:
        return leaves
    return [leaves.get(t.id, np.zeros(t.shape, dtype=t.data.dtype)) for t in wrt]


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5,
               coords: Sequence[int] | None = None, refinements: int = 6) -> float:
    """Max relative error |a - n| / max(1e-8, |a| + |n|) between backward and central differences.

    ``coords`` restricts the comparison to a subset of flat indices of
    ``x`` (useful for large parameter tensors).  When ``x +- eps`` selects a
    different relu / max-pool branch than ``x`` itself, the difference
    quotient is not a derivative; the step is then quartered, at most
    ``refinements`` times, and the last estimate is used either way.
    """
    was = x.requires_grad
    x.requires_grad = True
    with record_branches() as base:
        root = f(x)
    (analytic,) = backward(root, [x])
    x.requires_grad = was
    flat = x.data.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    for i in idx:
        orig = flat[i]
        h = eps
        for attempt in range(refinements + 1):
            flat[i] = orig + h
            with record_branches() as up:
                hi = f(x).item()
            flat[i] = orig - h
            with record_branches() as down:
                lo = f(x).item()
            flat[i] = orig
            if up == base and down == base:
                break
            h /= 4.0
        numeric = (hi - lo) / (2 * h)
        a = analytic.reshape(-1)[i]
        err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
        worst = max(worst, err)
    return worst
