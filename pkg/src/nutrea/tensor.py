"""Dense tensors with a small reverse-mode autodiff tape.

Values are numpy arrays.  Every operation that touches a tensor with
``requires_grad`` records an :class:`Op` on the output; :func:`backward`
orders those ops into a :class:`Tape` and sweeps it in reverse.
"""
from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp


class DimensionError(ValueError):
    pass


class ContractError(ValueError):
    pass


class Op:
    __slots__ = ("name", "inputs", "backward_fn")

    def __init__(self, name: str, inputs: tuple, backward_fn: Callable):
        self.name = name
        self.inputs = inputs
        # maps the output gradient to one gradient (or None) per input
        self.backward_fn = backward_fn


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_op", "_retain")

    def __init__(self, data, requires_grad: bool = False, _op: Optional[Op] = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._op = _op
        self._retain = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"expected a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def retain_grad(self) -> "Tensor":
        self._retain = True
        return self

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> "Tape":
        return backward(self)

    # operator sugar
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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    return Tensor(arr)


def _finite(arr: np.ndarray, name: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{name} produced non-finite values")
    return arr


def _make(data: np.ndarray, name: str, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    _finite(data, name)
    if any(t.requires_grad for t in inputs):
        return Tensor(data, requires_grad=True, _op=Op(name, tuple(inputs), backward_fn))
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    return a, b


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _make(a.data + b.data, "add", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _make(a.data - b.data, "sub", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _make(a.data * b.data, "mul", (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data
    return _make(out, "div", (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def relu(x: Tensor) -> Tensor:
    # subgradient at exactly 0 is 0
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.dtype), "relu", (x,), lambda g: (g * mask,))


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _make(out, "exp", (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise FloatingPointError("log of non-positive value")
    return _make(np.log(x.data), "log", (x,), lambda g: (g / x.data,))


def clamp_min(x: Tensor, floor: float) -> Tensor:
    mask = x.data >= floor
    return _make(np.where(mask, x.data, floor).astype(x.dtype), "clamp_min", (x,),
                 lambda g: (g * mask,))


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return _make(a.data @ b.data, "matmul", (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(x: Tensor) -> Tensor:
    return _make(x.data.T, "transpose", (x,), lambda g: (g.T,))


def reshape(x: Tensor, shape: tuple) -> Tensor:
    return _make(x.data.reshape(shape), "reshape", (x,), lambda g: (g.reshape(x.shape),))


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out), "sum", (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / n)


def getitem(x: Tensor, key) -> Tensor:
    def bw(g):
        full = np.zeros_like(x.data)
        full[key] += g
        return (full,)

    return _make(np.array(x.data[key]), "getitem", (x,), bw)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    if not parts:
        raise DimensionError("concat of zero parts")
    if len(parts) == 1:
        return parts[0]
    ref = parts[0].shape
    ax = axis % len(ref)
    for p in parts[1:]:
        if len(p.shape) != len(ref) or any(
                p.shape[d] != ref[d] for d in range(len(ref)) if d != ax):
            raise DimensionError(f"concat shape mismatch: {ref} vs {p.shape} on axis {axis}")
    bounds = np.cumsum([p.shape[ax] for p in parts])[:-1]
    return _make(np.concatenate([p.data for p in parts], axis=ax), "concat", parts,
                 lambda g: tuple(np.split(g, bounds, axis=ax)))


# ---------------------------------------------------------------- gather / scatter

def _scatter_matrix(index: np.ndarray, size: int, dtype) -> sp.csr_matrix:
    n = len(index)
    return sp.csr_matrix((np.ones(n, dtype=dtype), (index, np.arange(n))), shape=(size, n))


def _scatter_rows(values: np.ndarray, index: np.ndarray, size: int) -> np.ndarray:
    if values.ndim == 1:
        if values.dtype == np.float64:
            return np.bincount(index, weights=values, minlength=size)
        out = np.zeros(size, dtype=values.dtype)  # bincount would round through float64
        np.add.at(out, index, values)
        return out
    return np.asarray(_scatter_matrix(index, size, values.dtype) @ values)


def take_rows(x: Tensor, index) -> Tensor:
    """Gather rows ``x[index]``; repeated indices accumulate on the way back."""
    index = np.asarray(index, dtype=np.int64)
    n = x.shape[0]
    return _make(x.data[index], "take_rows", (x,), lambda g: (_scatter_rows(g, index, n),))


def index_add(src: Tensor, index, size: int) -> Tensor:
    """Sum rows of ``src`` into ``size`` output rows selected by ``index``."""
    index = np.asarray(index, dtype=np.int64)
    if len(index) != src.shape[0]:
        raise DimensionError(f"index_add: {len(index)} indices for {src.shape[0]} rows")
    out = _scatter_rows(src.data, index, size) if len(index) else \
        np.zeros((size,) + src.shape[1:], dtype=src.dtype)
    return _make(out, "index_add", (src,), lambda g: (g[index],))


# ---------------------------------------------------------------- normalisation

def softmax(x: Tensor, mask=None) -> Tensor:
    """Softmax of a vector; masked-out entries (mask False) get exactly 0."""
    if x.ndim != 1:
        raise DimensionError(f"softmax expects a vector, got {x.shape}")
    keep = np.ones(x.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if keep.shape != x.shape:
        raise DimensionError(f"mask shape {keep.shape} != {x.shape}")
    if not keep.any():
        raise ContractError("softmax with every entry masked")
    z = np.where(keep, x.data - x.data[keep].max(), 0.0)
    e = np.where(keep, np.exp(z), 0.0)
    out = (e / e.sum()).astype(x.dtype)
    return _make(out, "softmax", (x,), lambda g: (out * (g - np.dot(g, out)),))


def _segment_starts(segments: np.ndarray, num_segments: int) -> np.ndarray:
    counts = np.bincount(segments, minlength=num_segments)
    return np.concatenate([[0], np.cumsum(counts)[:-1]]), counts


def segment_softmax(x: Tensor, segments, num_segments: int) -> Tensor:
    """Softmax of a vector computed independently inside each segment.

    ``segments`` must be sorted (all entries of a segment contiguous) and every
    segment nonempty.
    """
    seg = np.asarray(segments, dtype=np.int64)
    starts, counts = _segment_starts(seg, num_segments)
    if np.any(counts == 0):
        raise ContractError("segment_softmax over an empty segment")
    seg_max = np.maximum.reduceat(x.data, starts)
    e = np.exp(x.data - seg_max[seg])
    total = np.add.reduceat(e, starts)
    out = (e / total[seg]).astype(x.dtype)

    def bw(g):
        dot = np.add.reduceat(g * out, starts)
        return (out * (g - dot[seg]),)

    return _make(out, "segment_softmax", (x,), bw)


def maxpool_rows(rows: Tensor) -> Tensor:
    """Columnwise max of a k x d matrix (zero vector when k == 0).

    The gradient of each column goes to the lowest row attaining the max.
    """
    if rows.ndim != 2:
        raise DimensionError(f"maxpool_rows expects a matrix, got {rows.shape}")
    k, d = rows.shape
    if k == 0:
        return _make(np.zeros(d, dtype=rows.dtype), "maxpool_rows", (rows,),
                     lambda g: (np.zeros((0, d), dtype=rows.dtype),))
    arg = rows.data.argmax(axis=0)  # first occurrence on ties
    cols = np.arange(d)

    def bw(g):
        full = np.zeros_like(rows.data)
        full[arg, cols] = g
        return (full,)

    return _make(rows.data[arg, cols], "maxpool_rows", (rows,), bw)


def segment_max(x: Tensor, segments, num_segments: int) -> Tensor:
    """Batched :func:`maxpool_rows`: row ``i`` of ``x`` pools into segment ``segments[i]``.

    Empty segments give zero rows; ties route gradient to the lowest row index.
    """
    seg = np.asarray(segments, dtype=np.int64)
    if x.ndim != 2 or len(seg) != x.shape[0]:
        raise DimensionError(f"segment_max: {x.shape} with {len(seg)} segment ids")
    d = x.shape[1]
    if len(seg) == 0:
        return _make(np.zeros((num_segments, d), dtype=x.dtype), "segment_max", (x,),
                     lambda g: (np.zeros_like(x.data),))
    # pad to num_segments x width x d; stable sort keeps original order inside a segment
    order = np.argsort(seg, kind="stable")
    ss = seg[order]
    starts, counts = _segment_starts(ss, num_segments)
    slot = np.arange(len(ss)) - starts[ss]
    width = int(counts.max())
    padded = np.full((width, num_segments, d), -np.inf, dtype=x.dtype)
    padded[slot, ss] = x.data[order]
    out = padded[0].copy()
    arg = np.zeros((num_segments, d), dtype=np.int64)
    for j in range(1, width):
        better = padded[j] > out  # strict: ties keep the earlier row
        np.copyto(out, padded[j], where=better)
        arg[better] = j
    empty = counts == 0
    out[empty] = 0
    rowmap = np.full((num_segments, width), -1, dtype=np.int64)
    rowmap[ss, slot] = order
    src_rows = np.take_along_axis(rowmap, arg, axis=1)  # num_segments x d
    cols = np.broadcast_to(np.arange(d), src_rows.shape)
    live = ~empty

    def bw(g):
        full = np.zeros_like(x.data)
        full[src_rows[live], cols[live]] = g[live]
        return (full,)

    return _make(out, "segment_max", (x,), bw)


# ---------------------------------------------------------------- autodiff

class Tape:
    """Recorded operations in topological order (inputs before outputs)."""

    def __init__(self, ops: list[tuple[Tensor, Op]]):
        self.ops = ops

    def __len__(self) -> int:
        return len(self.ops)

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        order: list[tuple[Tensor, Op]] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(out, False)]
        while stack:
            t, expanded = stack.pop()
            if t._op is None:
                continue
            if expanded:
                order.append((t, t._op))
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for inp in t._op.inputs:
                if inp._op is not None and id(inp) not in seen:
                    stack.append((inp, False))
        return cls(order)


def backward(loss: Tensor) -> Tape:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor requiring grad")
    tape = Tape.from_output(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}

    def deliver(t: Tensor, g: np.ndarray) -> None:
        if t._op is None or t._retain:
            t.grad = g.copy() if t.grad is None else t.grad + g
        if t._op is not None:
            k = id(t)
            grads[k] = g if k not in grads else grads[k] + g

    if loss._op is None:
        deliver(loss, np.ones_like(loss.data))
        return tape
    if loss._retain:
        loss.grad = np.ones_like(loss.data)
    for t, op in reversed(tape.ops):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        for inp, gi in zip(op.inputs, op.backward_fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            deliver(inp, np.asarray(gi, dtype=inp.dtype).reshape(inp.shape))
    return tape


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-3,
                      dtype=np.float64) -> float:
    """Worst elementwise relative error between backward() and central differences.

    Pass ``dtype=np.longdouble`` to push rounding noise on identically-zero
    derivatives below the 1e-8 denominator floor.
    """
    base = np.array(x.data, dtype=dtype)
    probe = Tensor(base.copy(), requires_grad=True)
    backward(f(probe))
    analytic = np.zeros_like(base) if probe.grad is None else probe.grad.astype(dtype)
    numeric = np.zeros_like(base)
    flat = numeric.reshape(-1)
    for i in range(base.size):
        hi = base.copy().reshape(-1)
        lo = base.copy().reshape(-1)
        hi[i] += eps
        lo[i] -= eps
        # .data rather than .item(): a Python float would drop extended precision
        f_hi = np.asarray(f(Tensor(hi.reshape(base.shape))).data, dtype=dtype).sum()
        f_lo = np.asarray(f(Tensor(lo.reshape(base.shape))).data, dtype=dtype).sum()
        flat[i] = (f_hi - f_lo) / (2 * eps)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if base.size else 0.0
