"""Dense tensors with a closed catalog of differentiable primitives.

Gradients are recorded on an explicit :class:`GradTape`.  Operations executed
outside an active tape are plain numpy computations and never track gradients::

    x = tensor([1.0, 2.0, 3.0], requires_grad=True)
    with GradTape() as tape:
        loss = F.sum(x * x)
    tape.backward(loss)
    x.grad  # -> [2, 4, 6]

Storage is float32 unless :func:`precision` selects float64 (used by oracle
tests that need tighter gradient tolerances).
"""

from __future__ import annotations

import contextlib
import threading
import weakref
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
import scipy.sparse as sp


class ShapeError(ValueError):
    """Operand extents are incompatible with the primitive."""


class NumericError(ArithmeticError):
    """A non-finite value entered or left a primitive."""


class TapeError(RuntimeError):
    """Misuse of a gradient tape (reuse, foreign loss, non-scalar loss)."""


_state = threading.local()


def _dtype():
    return getattr(_state, "dtype", np.float32)


def _active_tape() -> Optional["GradTape"]:
    return getattr(_state, "tape", None)


@contextlib.contextmanager
def precision(name: str):
    """Temporarily create tensors at ``"float32"`` or ``"float64"``."""
    if name not in ("float32", "float64"):
        raise ValueError(f"unknown precision {name!r}")
    old = _dtype()
    _state.dtype = np.dtype(name).type
    try:
        yield
    finally:
        _state.dtype = old


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite value in {what}")


class Tensor:
    """N-dimensional float array that can take part in a gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None,
                 _check: bool = True):
        arr = np.asarray(data)
        if _check:
            if arr.dtype != _dtype():
                arr = arr.astype(_dtype())
            _check_finite(arr, name or "tensor construction")
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_dtype())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[_Node] = None
        self.name = name

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
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, _check=False)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar; all of these route through the primitive catalog
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

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not a primitive")
        return scalar_mul(self, 1.0 / float(other))

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

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
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def tensor(data, requires_grad: bool = False, name: Optional[str] = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


class _Node:
    __slots__ = ("out", "inputs", "backward", "op")

    def __init__(self, out, inputs, backward, op):
        self.out = weakref.ref(out)     # a strong reference would form a cycle with out._node
        self.inputs = inputs
        self.backward = backward
        self.op = op


class GradTape:
    """Ordered record of executed primitives.

    A tape is entered as a context manager; primitives run inside it are
    appended in execution order, so inputs always precede their consumers.
    Each tape supports exactly one :meth:`backward` call.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False
        self._prev = None

    def __enter__(self) -> "GradTape":
        if self.consumed:
            raise TapeError("tape already consumed")
        self._prev = _active_tape()
        _state.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _state.tape = self._prev
        self._prev = None

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


def backward(loss: Tensor, tape: GradTape) -> None:
    """Populate ``.grad`` on every requires-grad leaf reachable from ``loss``.

    Gradients accumulate additively into existing ``.grad`` arrays.
    """
    if tape.consumed:
        raise TapeError("second backward on a consumed tape")
    if loss.size != 1 or loss.ndim > 1:
        raise TapeError(f"loss must be scalar, got shape {loss.shape}")
    if loss._node is None or loss._node not in _membership(tape):
        raise TapeError("loss was not produced under this tape")
    tape.consumed = True
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        out = node.out()
        g = None if out is None else grads.pop(id(out), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                continue
            ig = ig.astype(inp.data.dtype, copy=False)
            if inp._node is None:
                inp.grad = ig.astype(inp.data.dtype, copy=True) if inp.grad is None else inp.grad + ig
            else:
                key = id(inp)
                grads[key] = ig if key not in grads else grads[key] + ig
    tape.nodes = []


def _membership(tape: GradTape):
    # identity-based membership without hashing nodes by value
    return _IdSet(tape.nodes)


class _IdSet:
    def __init__(self, items):
        self._ids = {id(x) for x in items}

    def __contains__(self, item):
        return id(item) in self._ids


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_dtype()))


def _result(data: np.ndarray, inputs: Sequence, backward: Callable, op: str) -> Tensor:
    if data.dtype != _dtype():
        data = data.astype(_dtype())
    _check_finite(data, op)
    tape = _active_tape()
    track = tape is not None and any(isinstance(i, Tensor) and i.requires_grad for i in inputs)
    out = Tensor(data, requires_grad=track, _check=False)
    if track:
        node = _Node(out, tuple(inputs), backward, op)
        out._node = node
        tape.nodes.append(node)
    return out


def _is_scalar(t: Tensor) -> bool:
    return t.ndim == 0


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (use expand)")


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    if g.shape == t.shape:
        return g
    return np.asarray(g.sum(), dtype=g.dtype).reshape(t.shape)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "add")
    return _result(a.data + b.data, (a, b),
                   lambda g: (_reduce_to(g, a), _reduce_to(g, b)), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "sub")
    return _result(a.data - b.data, (a, b),
                   lambda g: (_reduce_to(g, a), _reduce_to(-g, b)), "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "mul")
    return _result(a.data * b.data, (a, b),
                   lambda g: (_reduce_to(g * b.data, a), _reduce_to(g * a.data, b)), "mul")


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data * a.data.dtype.type(c), (a,), lambda g: (g * c,), "scalar_mul")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):     # overflow is reported by the finite check instead
        out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    if (a.data <= 0).any():
        raise NumericError("log of non-positive value")
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def abs(a: Tensor) -> Tensor:  # noqa: A001 - catalog name
    return _result(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * (x * x * x))
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * d,)

    return _result(out, (a,), bw, "gelu")


# ------------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes must match exactly."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch extents differ: {a.shape} x {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        return (np.matmul(g, np.swapaxes(b.data, -1, -2)),
                np.matmul(np.swapaxes(a.data, -1, -2), g))

    return _result(out, (a, b), bw, "matmul")


def _pad_hw(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW input and OIHW weights."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW/OIHW, got {x.shape}, {w.shape}")
    n, c, h, wd = x.shape
    o, c2, kh, kw = w.shape
    if c != c2:
        raise ShapeError(f"conv2d channel mismatch: input {c}, weight {c2}")
    if b is not None and b.shape != (o,):
        raise ShapeError(f"conv2d bias shape {b.shape} != ({o},)")
    s, p = int(stride), int(padding)
    ho = (h + 2 * p - kh) // s + 1
    wo = (wd + 2 * p - kw) // s + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError("conv2d output would be empty")
    xp = _pad_hw(x.data, p)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
    wmat = w.data.reshape(o, -1)
    out = cols @ wmat.T
    if b is not None:
        out += b.data
    out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (g2.T @ cols).reshape(w.shape)
        gcols = (g2 @ wmat).reshape(n, ho, wo, c, kh, kw)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, p:p + h, p:p + wd] if p else gxp
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        return (gx, gw, gb)

    inputs = (x, w) if b is None else (x, w, b)
    return _result(np.ascontiguousarray(out), inputs, bw, "conv2d")


def conv_transpose2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1,
                     padding: int = 0) -> Tensor:
    """Transposed convolution; weights laid out as (C_in, C_out, kh, kw)."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv_transpose2d expects NCHW/IOHW, got {x.shape}, {w.shape}")
    n, c, h, wd = x.shape
    c2, o, kh, kw = w.shape
    if c != c2:
        raise ShapeError(f"conv_transpose2d channel mismatch: input {c}, weight {c2}")
    s, p = int(stride), int(padding)
    hf, wf = (h - 1) * s + kh, (wd - 1) * s + kw
    ho, wo = hf - 2 * p, wf - 2 * p
    if ho <= 0 or wo <= 0:
        raise ShapeError("conv_transpose2d output would be empty")
    xcols = x.data.transpose(0, 2, 3, 1).reshape(-1, c)
    wmat = w.data.reshape(c, -1)
    cols = (xcols @ wmat).reshape(n, h, wd, o, kh, kw)
    full = np.zeros((n, o, hf, wf), dtype=x.data.dtype)
    for i in range(kh):
        for j in range(kw):
            full[:, :, i:i + s * h:s, j:j + s * wd:s] += cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    out = full[:, :, p:p + ho, p:p + wo]
    if b is not None:
        out = out + b.data[None, :, None, None]

    def bw(g):
        gfull = np.zeros((n, o, hf, wf), dtype=g.dtype)
        gfull[:, :, p:p + ho, p:p + wo] = g
        gcols = np.empty((n, h, wd, o, kh, kw), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gcols[:, :, :, :, i, j] = gfull[:, :, i:i + s * h:s, j:j + s * wd:s].transpose(0, 2, 3, 1)
        gmat = gcols.reshape(-1, o * kh * kw)
        gx = (gmat @ wmat.T).reshape(n, h, wd, c).transpose(0, 3, 1, 2)
        gw = (xcols.T @ gmat).reshape(w.shape)
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        return (gx, gw, gb)

    inputs = (x, w) if b is None else (x, w, b)
    return _result(np.ascontiguousarray(out), inputs, bw, "conv_transpose2d")


def max_pool2d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping max pooling (kernel == stride); ties route to the first maximum."""
    n, c, h, wd = x.shape
    if h % k or wd % k:
        raise ShapeError(f"max_pool2d: extents {h}x{wd} not divisible by {k}")
    blocks = x.data.reshape(n, c, h // k, k, wd // k, k).transpose(0, 1, 2, 4, 3, 5)
    flat = blocks.reshape(n, c, h // k, wd // k, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, arg[..., None], g[..., None], axis=-1)
        gx = gflat.reshape(n, c, h // k, wd // k, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, wd)
        return (gx,)

    return _result(out, (x,), bw, "max_pool2d")


# ------------------------------------------------------------------- reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        gk = g if keepdims else np.expand_dims(g, axes)
        return (np.broadcast_to(gk, x.shape).copy(),)

    return _result(np.asarray(out), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        gk = g if keepdims else np.expand_dims(g, axes)
        return (np.broadcast_to(gk / count, x.shape).copy(),)

    return _result(np.asarray(out, dtype=x.data.dtype), (x,), bw, "mean")


# ------------------------------------------------------------------- structural

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as err:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}") from err
    return _result(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"invalid permutation {axes} for rank {x.ndim}")
    inv = tuple(np.argsort(axes))
    return _result(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                   lambda g: (g.transpose(inv),), "permute")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [_as_tensor(t) for t in xs]
    if not xs:
        raise ShapeError("concat of empty list")
    ax = axis % xs[0].ndim
    ref = xs[0].shape
    for t in xs[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat extents differ off-axis: {ref} vs {t.shape}")
    out = np.concatenate([t.data for t in xs], axis=ax)
    splits = np.cumsum([t.shape[ax] for t in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=ax))

    return _result(out, tuple(xs), bw, "concat")


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [_as_tensor(t) for t in xs]
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in xs]
    return concat(expanded, axis)


def _basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, np.integer)) or i is Ellipsis or i is None for i in items)


def getitem(x: Tensor, idx) -> Tensor:
    """Basic (slice/integer) indexing; the result is a copy."""
    if not _basic_index(idx):
        raise ShapeError("getitem supports basic slicing only")
    out = np.array(x.data[idx], copy=True)

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[idx] = g
        return (gx,)

    return _result(out, (x,), bw, "slice")


def expand(x: Tensor, shape) -> Tensor:
    """Broadcast size-1 axes to ``shape`` (same rank required)."""
    shape = tuple(int(s) for s in shape)
    if len(shape) != x.ndim or any(a != b and a != 1 for a, b in zip(x.shape, shape)):
        raise ShapeError(f"cannot expand {x.shape} to {shape}")
    axes = tuple(i for i, (a, b) in enumerate(zip(x.shape, shape)) if a == 1 and b != 1)
    out = np.broadcast_to(x.data, shape).copy()
    return _result(out, (x,), lambda g: (g.sum(axis=axes, keepdims=True),), "expand")


# ------------------------------------------------------------------- normalisation

def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis with max subtraction."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _result(out, (x,), bw, "softmax")


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _result(out, (x,), bw, "log_softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis, then apply learnable scale and shift."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm params must be ({d},), got {gamma.shape}, {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def bw(g):
        gxhat = g * gamma.data
        gx = rstd * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                     - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(x.ndim - 1))
        return (gx, (g * xhat).sum(axis=red), g.sum(axis=red))

    return _result(out.astype(x.data.dtype, copy=False), (x, gamma, beta), bw, "layer_norm")


# ------------------------------------------------------------------- lookups

def embedding(table: Tensor, idx) -> Tensor:
    idx = np.asarray(idx)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError("embedding indices must be integers")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError("embedding index out of range")
    out = table.data[idx]

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _result(out, (table,), bw, "embedding")


def bilinear_weights(coords: np.ndarray, h: int, w: int) -> sp.csr_matrix:
    """Sparse [P, h*w] interpolation matrix with zero padding outside the map."""
    coords = np.asarray(coords, dtype=np.float64)
    if not np.isfinite(coords).all():
        raise NumericError("non-finite sampling coordinates")
    p = coords.shape[0]
    x, y = coords[:, 0], coords[:, 1]
    x0, y0 = np.floor(x), np.floor(y)
    fx, fy = x - x0, y - y0
    rows, cols, vals = [], [], []
    for dx, dy, wt in ((0, 0, (1 - fx) * (1 - fy)), (1, 0, fx * (1 - fy)),
                       (0, 1, (1 - fx) * fy), (1, 1, fx * fy)):
        xi, yi = x0 + dx, y0 + dy
        ok = (xi >= 0) & (xi <= w - 1) & (yi >= 0) & (yi <= h - 1) & (wt != 0)
        idx = np.nonzero(ok)[0]
        rows.append(idx)
        cols.append((yi[idx] * w + xi[idx]).astype(np.int64))
        vals.append(wt[idx])
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                         shape=(p, h * w))


def bilinear_sample(feat: Tensor, coords, weights: Optional[sp.csr_matrix] = None) -> Tensor:
    """Sample ``feat`` [C,H,W] at pixel coordinates [P,2] (x, y) -> [P,C].

    Coordinates are constants; only ``feat`` receives a gradient.  A
    precomputed :func:`bilinear_weights` matrix may be passed to skip setup.
    """
    if feat.ndim != 3:
        raise ShapeError(f"bilinear_sample expects [C,H,W], got {feat.shape}")
    c, h, w = feat.shape
    if weights is None:
        coords = np.asarray(coords.data if isinstance(coords, Tensor) else coords)
        if coords.ndim != 2 or coords.shape[1] != 2:
            raise ShapeError(f"coords must be [P,2], got {coords.shape}")
        weights = bilinear_weights(coords, h, w)
    mat = weights.astype(feat.data.dtype)
    fm = feat.data.reshape(c, h * w)
    out = np.asarray(mat @ fm.T)

    def bw(g):
        return (np.asarray(mat.T @ g).T.reshape(c, h, w),)

    return _result(out, (feat,), bw, "bilinear_sample")


# ------------------------------------------------------------------- checks

def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-3,
                      max_elements: Optional[int] = None, seed: int = 0) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` must be deterministic and return a scalar tensor.  Analytic
    gradients are taken at the precision of ``x``; the differences are
    evaluated with the input promoted to float64 so that the reference is
    not limited by 32-bit cancellation.  ``max_elements`` checks a random
    subset of coordinates for large inputs.
    """
    leaf = Tensor(x.data.copy(), requires_grad=True)
    with GradTape() as tape:
        out = f(leaf)
    tape.backward(out)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
    base = x.data.astype(np.float64)
    flat = base.reshape(-1)
    idx = np.arange(flat.size)
    if max_elements is not None and flat.size > max_elements:
        idx = np.random.default_rng(seed).choice(flat.size, size=max_elements, replace=False)
    numeric = np.zeros(idx.size)
    with precision("float64"):
        for k, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f(Tensor(base)).data)
            flat[i] = orig - eps
            fm = float(f(Tensor(base)).data)
            flat[i] = orig
            numeric[k] = (fp - fm) / (2 * eps)
    a = analytic.astype(np.float64).reshape(-1)[idx]
    rel = np.abs(a - numeric) / (np.abs(a) + np.abs(numeric) + 1e-8)
    return float(rel.max()) if rel.size else 0.0


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_dtype()), requires_grad=requires_grad)


def no_grad_params(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
