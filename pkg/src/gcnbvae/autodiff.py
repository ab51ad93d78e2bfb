"""Tape-based reverse-mode differentiation over a small, fixed op set.

Tensors are numpy arrays of rank <= 2. Every op records its parents and a
vector-Jacobian product; :func:`backward` walks the graph once in reverse
topological order. Constants (plain arrays, sparse matrices, index arrays)
never receive gradients.

Conventions at non-differentiable points: ``|x|`` has subgradient 0 at 0,
the nearest-neighbour index selection is treated as constant, and ``clip``
passes gradient only strictly inside its interval.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp


class ShapeError(ValueError):
    """Operand shapes are incompatible for an op."""


class Value:
    """A node in the computation graph."""

    __slots__ = ("data", "grad", "op", "_parents", "_vjp", "requires_grad")

    def __init__(self, data, parents=(), vjp=None, op="leaf", requires_grad=True):
        data = np.asarray(data, dtype=np.float64)
        if data.ndim > 2:
            raise ShapeError(f"rank {data.ndim} tensors are not supported")
        self.data = data
        self.grad = None
        self.op = op
        self._parents = tuple(parents)
        self._vjp = vjp
        self.requires_grad = requires_grad or any(p.requires_grad for p in self._parents)

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Value(op={self.op}, shape={self.shape})"

    def zero_grad(self):
        self.grad = None

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / float(other))
        return divide(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_value(x) -> Value:
    if isinstance(x, Value):
        return x
    return Value(x, requires_grad=False, op="const")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    # (1, C) row broadcast or (R, 1) column broadcast
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True).reshape(shape)


def _check_broadcast(a: Value, b: Value, name: str):
    sa, sb = a.shape, b.shape
    if sa == sb or sa == () or sb == ():
        return
    if len(sa) == 2 and len(sb) == 2:
        ok = all(x == y or x == 1 or y == 1 for x, y in zip(sa, sb))
        if ok:
            return
    raise ShapeError(f"{name}: incompatible shapes {sa} and {sb}")


# ---------------------------------------------------------------------------
# elementwise / linear ops


def add(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    _check_broadcast(a, b, "add")
    return Value(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    _check_broadcast(a, b, "sub")
    return Value(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)), "sub")


def mul(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    _check_broadcast(a, b, "mul")
    return Value(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)), "mul")


def divide(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    _check_broadcast(a, b, "divide")
    out = a.data / b.data

    def vjp(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return Value(out, (a, b), vjp, "divide")


def scale(a, c: float) -> Value:
    a = as_value(a)
    return Value(a.data * c, (a,), lambda g: (g * c,), "scale")


def matmul(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    return Value(a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T if a.requires_grad else None,
                            a.data.T @ g if b.requires_grad else None), "matmul")


def spmm(s: sp.spmatrix, x, s_t: sp.spmatrix | None = None) -> Value:
    """Sparse constant times dense value.

    ``s_t`` optionally supplies a precomputed CSR transpose for the backward pass.
    """
    x = as_value(x)
    if x.data.ndim != 2 or s.shape[1] != x.shape[0]:
        raise ShapeError(f"spmm: {s.shape} @ {x.shape}")
    st = s.T if s_t is None else s_t
    return Value(s @ x.data, (x,), lambda g: (st @ g,), "spmm")


def elu(a) -> Value:
    """ELU with alpha = 1."""
    a = as_value(a)
    neg = a.data < 0
    em1 = np.expm1(np.minimum(a.data, 0.0))
    out = np.where(neg, em1, a.data)
    deriv = np.where(neg, em1 + 1.0, 1.0)
    return Value(out, (a,), lambda g: (g * deriv,), "elu")


def exp(a) -> Value:
    a = as_value(a)
    out = np.exp(a.data)
    return Value(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Value:
    a = as_value(a)
    return Value(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def square(a) -> Value:
    a = as_value(a)
    return Value(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def absolute(a) -> Value:
    a = as_value(a)
    return Value(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def clip(a, lo: float, hi: float) -> Value:
    a = as_value(a)
    inside = (a.data > lo) & (a.data < hi)
    return Value(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clip")


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum_(a, axis=None) -> Value:
    """Sum of all entries (scalar) or along ``axis`` keeping a rank-2 result."""
    a = as_value(a)
    if axis is None:
        return Value(a.data.sum(), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),), "sum")
    out = a.data.sum(axis=axis, keepdims=True)
    return Value(out, (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),), "sum")


def mean(a, axis=None) -> Value:
    a = as_value(a)
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis), 1.0 / n)


def row_norms(a, eps: float = 1e-12) -> Value:
    """Euclidean norm of each row, shape (R, 1). Rows shorter than ``eps`` get zero gradient."""
    a = as_value(a)
    norms = np.sqrt(np.sum(a.data * a.data, axis=1, keepdims=True))
    safe = np.where(norms > eps, norms, np.inf)
    return Value(norms, (a,), lambda g: (g * a.data / safe,), "row_norms")


def gather_rows(a, idx) -> Value:
    """Rows ``a[idx]`` for a constant integer index array."""
    a = as_value(a)
    idx = np.asarray(idx, dtype=np.int64)
    n_rows = a.shape[0]

    def vjp(g):
        out = np.empty((n_rows, g.shape[1]))
        for c in range(g.shape[1]):
            out[:, c] = np.bincount(idx, weights=g[:, c], minlength=n_rows)
        return (out,)

    return Value(a.data[idx], (a,), vjp, "gather_rows")


def reshape(a, shape) -> Value:
    a = as_value(a)
    return Value(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def swap_blocks(a, outer: int, inner: int) -> Value:
    """Reorder an (outer, inner*F) array into (inner, outer*F).

    Converts between node-major ``(N, B*F)`` and batch-major ``(B, N*F)``
    layouts of a batched vertex signal.
    """
    a = as_value(a)
    rows, cols = a.shape
    if rows != outer or cols % inner:
        raise ShapeError(f"swap_blocks: shape {a.shape} incompatible with ({outer}, {inner})")
    f = cols // inner

    def swap(x, o, i):
        return x.reshape(o, i, f).transpose(1, 0, 2).reshape(i, o * f)

    return Value(swap(a.data, outer, inner), (a,), lambda g: (swap(g, inner, outer),), "swap_blocks")


def min_index(dist: np.ndarray | Value, axis: int = 1) -> np.ndarray:
    """Index of the minimum along ``axis``; a constant selection, never differentiated."""
    d = dist.data if isinstance(dist, Value) else np.asarray(dist)
    return np.argmin(d, axis=axis)


def hstack(values: Sequence[Value]) -> Value:
    """Concatenate rank-2 values with equal row counts along columns."""
    values = [as_value(v) for v in values]
    widths = [v.shape[1] for v in values]
    if len({v.shape[0] for v in values}) != 1:
        raise ShapeError(f"hstack: row counts differ {[v.shape for v in values]}")
    cuts = np.cumsum(widths)[:-1]
    return Value(np.hstack([v.data for v in values]), values,
                 lambda g: tuple(np.split(g, cuts, axis=1)), "hstack")


def sum_all(values: Sequence[Value]) -> Value:
    total = values[0]
    for v in values[1:]:
        total = total + v
    return total


# ---------------------------------------------------------------------------
# driver


def _topological_order(root: Value) -> list[Value]:
    order, seen = [], set()
    stack = [(root, False)]
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
    return order


def forward(root: Value) -> np.ndarray:
    """Value of a graph node. Graphs are evaluated eagerly, so this is a copy of ``root.data``."""
    return np.array(root.data, copy=True)


def backward(root: Value) -> None:
    """Accumulate d(root)/d(node) into ``node.grad`` for every node reachable from ``root``."""
    if root.data.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    order = _topological_order(root)
    for node in order:
        node.grad = None
    root.grad = np.ones_like(root.data)
    for node in reversed(order):
        if node._vjp is None or node.grad is None:
            continue
        for parent, g in zip(node._parents, node._vjp(node.grad)):
            if g is None or not parent.requires_grad:
                continue
            # gradients are never updated in place, so sharing arrays between nodes is safe
            g = np.asarray(g, dtype=np.float64).reshape(parent.shape)
            parent.grad = g if parent.grad is None else parent.grad + g


def grad(f: Callable[..., Value], *point: np.ndarray) -> list[np.ndarray]:
    """Gradients of scalar ``f`` with respect to each of its array arguments."""
    leaves = [Value(np.array(p, dtype=np.float64, copy=True)) for p in point]
    out = f(*leaves)
    backward(out)
    return [np.zeros_like(l.data) if l.grad is None else l.grad for l in leaves]


def check_gradient(f: Callable[..., Value], point, eps: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``point`` is an array or a sequence of arrays, passed to ``f`` as leaf values.
    """
    if not 0 < eps <= 1e-3:
        raise ValueError("eps must lie in (0, 1e-3]")
    if isinstance(point, np.ndarray) or np.isscalar(point):
        point = [point]
    arrays = [np.array(p, dtype=np.float64, copy=True) for p in point]
    analytic = grad(f, *arrays)
    worst = 0.0
    for k, base in enumerate(arrays):
        flat = base.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = float(f(*[as_value(a) for a in arrays]).data)
            flat[i] = orig - eps
            down = float(f(*[as_value(a) for a in arrays]).data)
            flat[i] = orig
            fd = (up - down) / (2 * eps)
            a = analytic[k].reshape(-1)[i]
            worst = max(worst, abs(a - fd) / (abs(a) + 1e-12))
    return worst


__all__ = [
    "Value", "ShapeError", "as_value", "add", "sub", "mul", "divide", "scale",
    "matmul", "spmm", "elu", "exp", "log", "square", "absolute", "clip", "sum_",
    "mean", "sum_all", "hstack", "row_norms", "gather_rows", "reshape", "swap_blocks", "min_index",
    "forward", "backward", "grad", "check_gradient",
]
