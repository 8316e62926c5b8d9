"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Every operation returns a new :class:`Tensor`. Tensors that depend on a leaf
with ``requires_grad=True`` remember their parents and a backward closure; all
others are plain constants, so :func:`stop_gradient` is simply "copy the value
and forget the parents".

Node ids come from one process-wide counter, so creation order is a valid
topological order and :func:`backward` walks nodes in exact reverse creation
order. Gradients are therefore deterministic for a fixed graph.

Binary elementwise ops only broadcast along leading dimensions: the smaller
operand's shape must be a suffix of the larger one. Anything else must go
through :func:`broadcast` explicitly.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

_node_ids = itertools.count()


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an op."""


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "node_id", "op", "parents", "_backward", "__weakref__")

    def __init__(self, value, requires_grad: bool = False, *, op: str = "leaf", parents=(), backward=None):
        self.value = np.array(value, dtype=np.float64) if not isinstance(value, np.ndarray) else value.astype(np.float64, copy=False)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id = next(_node_ids)
        self.op = op
        self.parents: tuple[Tensor, ...] = tuple(parents)
        self._backward = backward

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def item(self) -> float:
        return float(self.value.reshape(-1)[0]) if self.value.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.value

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self) -> int:
        return len(self.value)

    # -- operator sugar ------------------------------------------------
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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    """Wrap arrays and Python numbers as constant tensors; pass tensors through."""
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(value: np.ndarray, op: str, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(value, requires_grad=True, op=op, parents=parents, backward=backward)
    return Tensor(value, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


def _check_binary(name: str, a: Tensor, b: Tensor) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    if len(sb) <= len(sa) and sa[len(sa) - len(sb):] == sb:
        return
    if len(sa) <= len(sb) and sb[len(sb) - len(sa):] == sa:
        return
    raise ShapeError(f"{name}: shape mismatch {sa} vs {sb}")


# -- elementwise binary ------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.value + b.value, "add", (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.value - b.value, "sub", (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary("mul", a, b)

    def backward(g):
        return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)

    return _make(a.value * b.value, "mul", (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary("div", a, b)
    out = a.value / b.value

    def backward(g):
        return _unbroadcast(g / b.value, a.shape), _unbroadcast(-g * out / b.value, b.shape)

    return _make(out, "div", (a, b), backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")

    def backward(g):
        return g @ b.value.T, a.value.T @ g

    return _make(a.value @ b.value, "matmul", (a, b), backward)


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return _make(x.value * c, "scale", (x,), lambda g: (g * c,))


# -- elementwise unary -------------------------------------------------------

def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.value)
    return _make(out, "exp", (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    return _make(np.log(x.value), "log", (x,), lambda g: (g / x.value,))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.value)
    return _make(out, "tanh", (x,), lambda g: (g * (1.0 - out * out),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.value > 0
    return _make(np.where(mask, x.value, 0.0), "relu", (x,), lambda g: (g * mask,))


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.value)

    def backward(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(out > 0, 0.5 / out, 0.0)
        return (g * d,)

    return _make(out, "sqrt", (x,), backward)


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes only where the input lies inside [lo, hi]."""
    x = as_tensor(x)
    inside = (x.value >= lo) & (x.value <= hi)
    return _make(np.clip(x.value, lo, hi), "clip", (x,), lambda g: (g * inside,))


# -- reductions and normalizations ------------------------------------------

def _expand_reduced(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.value.sum(axis=axis, keepdims=keepdims)
    return _make(out, "sum", (x,), lambda g: (_expand_reduced(g, x.shape, axis, keepdims).copy(),))


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.value.mean(axis=axis, keepdims=keepdims)
    n = x.value.size / max(out.size, 1)
    return _make(out, "mean", (x,), lambda g: (_expand_reduced(g, x.shape, axis, keepdims) / n,))


def softmax(x, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along ``axis``."""
    x = as_tensor(x)
    shifted = x.value - x.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, "softmax", (x,), backward)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.value - x.value.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, "log_softmax", (x,), backward)


def norm(x, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Euclidean norm along ``axis``. The gradient at a zero vector is defined as zero."""
    x = as_tensor(x)
    n = np.sqrt((x.value * x.value).sum(axis=axis, keepdims=True))

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        with np.errstate(divide="ignore", invalid="ignore"):
            unit = np.where(n > 0, x.value / n, 0.0)
        return (g * unit,)

    out = n if keepdims else np.squeeze(n, axis=axis)
    return _make(out, "norm", (x,), backward)


def squared_norm(x, axis: int = -1, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = (x.value * x.value).sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (2.0 * g * x.value,)

    return _make(out, "squared_norm", (x,), backward)


# -- structural ---------------------------------------------------------------

def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: no inputs")
    ref = list(ts[0].shape)
    ax = axis % len(ref)
    for t in ts[1:]:
        other = list(t.shape)
        if len(other) != len(ref) or any(a != b for i, (a, b) in enumerate(zip(ref, other)) if i != ax):
            raise ShapeError(f"concat: shape mismatch {ts[0].shape} vs {t.shape}")
    sizes = [t.shape[ax] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(ts)))

    return _make(np.concatenate([t.value for t in ts], axis=ax), "concat", ts, backward)


def slice_(x, index) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        full = np.zeros_like(x.value)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(x.value[index]), "slice", (x,), backward)


def broadcast(x, shape: Sequence[int]) -> Tensor:
    """Explicit numpy-style broadcast to ``shape``."""
    x = as_tensor(x)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.value, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast: shape mismatch {x.shape} vs {shape}") from None

    def backward(g):
        g = _unbroadcast(g, x.shape)
        axes = tuple(i for i, d in enumerate(x.shape) if d == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return _make(out, "broadcast", (x,), backward)


def gather_rows(table, idx) -> Tensor:
    """Rows of a 2-D table selected by an integer index array (embedding lookup)."""
    table = as_tensor(table)
    idx = np.asarray(idx, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"gather_rows: table must be 2-D, got {table.shape}")

    def backward(g):
        full = np.zeros_like(table.value)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _make(table.value[idx], "gather_rows", (table,), backward)


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.value.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: shape mismatch {x.shape} vs {tuple(shape)}") from None
    return _make(out, "reshape", (x,), lambda g: (g.reshape(x.shape),))


def transpose(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"transpose: expected 2-D, got {x.shape}")
    return _make(x.value.T.copy(), "transpose", (x,), lambda g: (g.T,))


def stop_gradient(x) -> Tensor:
    """Identity in value, zero in gradient."""
    x = as_tensor(x)
    return Tensor(x.value.copy(), op="stop_gradient")


# -- backward -----------------------------------------------------------------

@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    output: int


@dataclass
class Graph:
    """The differentiable part of an expression, in creation (topological) order."""

    tensors: list[Tensor] = field(default_factory=list)

    @property
    def nodes(self) -> list[Node]:
        return [Node(t.op, tuple(p.node_id for p in t.parents), t.node_id) for t in self.tensors if t.parents]

    @classmethod
    def trace(cls, root: Tensor) -> "Graph":
        seen: dict[int, Tensor] = {}
        stack = [root]
        while stack:
            t = stack.pop()
            if t.node_id in seen or not t.requires_grad:
                continue
            seen[t.node_id] = t
            stack.extend(t.parents)
        return cls([seen[k] for k in sorted(seen)])


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every trainable leaf.

    Returns a mapping from each reached trainable leaf to the gradient
    contributed by this call.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    graph = Graph.trace(loss)
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.value)}
    leaves: dict[Tensor, np.ndarray] = {}
    for t in reversed(graph.tensors):
        g = grads.pop(t.node_id, None)
        if g is None:
            continue
        if t.is_leaf:
            leaves[t] = g
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        for p, pg in zip(t.parents, t._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            if p.node_id in grads:
                grads[p.node_id] = grads[p.node_id] + pg
            else:
                grads[p.node_id] = np.array(pg, dtype=np.float64)
    return leaves


def grad(fn: Callable[[Tensor], Tensor], x) -> np.ndarray:
    """Gradient of scalar ``fn`` at ``x`` (array or tensor value)."""
    leaf = Tensor(np.array(as_tensor(x).value, copy=True), requires_grad=True)
    out = fn(leaf)
    backward(out)
    return np.zeros_like(leaf.value) if leaf.grad is None else leaf.grad


def numerical_jacobian(fn: Callable[[Tensor], Tensor], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference Jacobian of ``fn`` at ``x``; shape (out.size, x.size)."""
    base = np.array(as_tensor(x).value, dtype=np.float64)
    cols = []
    for i in range(base.size):
        up = base.copy().reshape(-1)
        dn = up.copy()
        up[i] += h
        dn[i] -= h
        fu = fn(Tensor(up.reshape(base.shape))).value.reshape(-1)
        fd = fn(Tensor(dn.reshape(base.shape))).value.reshape(-1)
        cols.append((fu - fd) / (2 * h))
    return np.stack(cols, axis=1)


def finite_difference_check(fn: Callable[[Tensor], Tensor], x, h: float = 1e-5) -> float:
    """Max relative error between the analytic gradient and central differences.

    The error per coordinate is ``|analytic - numeric| / (|numeric| + 1e-12)``.
    ``fn`` must be differentiable at ``x``; kinks (e.g. a norm at zero) are
    the caller's responsibility.
    """
    if not h > 0:
        raise ValueError(f"step h must be positive, got {h}")
    analytic = grad(fn, x).reshape(-1)
    numeric = numerical_jacobian(fn, x, h).reshape(-1)
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / (np.abs(numeric) + 1e-12)))
