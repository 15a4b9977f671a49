"""Minimal dense-tensor library with reverse-mode automatic differentiation.

Just enough machinery to express a BiLSTM classifier and its training
losses: elementwise arithmetic, matrix products, a few activations,
concatenation/slicing, reductions, and an embedding lookup. Two rules keep
the correctness surface small:

* no broadcasting anywhere: binary ops require identical shapes, and bias
  addition goes through an explicit row-replication op (``tile_rows``);
* ``backward`` runs once per graph; a second call on the same loss raises.

Training runs in float32. Gradient checking should build its graph in
float64 (pass ``dtype=np.float64`` when creating leaves), where central
finite differences are trustworthy at 1e-4 tolerances.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "GraphError",
    "NumericError",
    "tensor",
    "constant",
    "zeros",
    "no_grad",
    "grad_enabled",
    "add",
    "sub",
    "mul",
    "abs_diff",
    "elementwise",
    "sigmoid",
    "tanh",
    "relu",
    "activation",
    "softmax",
    "matmul",
    "concat",
    "concat_cols",
    "slice_cols",
    "reshape",
    "tile_rows",
    "embedding_lookup",
    "sum_all",
    "sum_last",
    "logsumexp_last",
    "scale",
    "backward",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class GraphError(RuntimeError):
    """Misuse of the computation graph (e.g. backward called twice)."""


class NumericError(ValueError):
    """Non-finite values where finite ones are required."""


class _GradMode(threading.local):
    def __init__(self):
        self.enabled = True


_grad_mode = _GradMode()


def grad_enabled() -> bool:
    return _grad_mode.enabled


class no_grad:
    """Context manager that suppresses graph construction.

    Forward results are identical; nodes built inside carry no parents and
    no backward closures, so inference does not pay for autodiff.
    """

    def __enter__(self):
        self._saved = _grad_mode.enabled
        _grad_mode.enabled = False
        return self

    def __exit__(self, *exc):
        _grad_mode.enabled = self._saved
        return False


class Tensor:
    """A dense array node in a computation graph.

    Attributes:
        values: the numpy payload (float32 or float64).
        requires_grad: whether gradients accumulate into this node.
        grad: same-shape gradient buffer, allocated on first use.
    """

    __slots__ = ("values", "requires_grad", "grad", "_parents", "_backprop", "_backward_ran")

    def __init__(self, values: np.ndarray, requires_grad: bool = False):
        self.values = values
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backprop: Callable[[], None] | None = None
        self._backward_ran = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def ensure_grad(self) -> np.ndarray:
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        return self.grad

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad: bool = False, dtype=np.float32) -> Tensor:
    """Create a leaf tensor from array-like data."""
    return Tensor(np.array(data, dtype=dtype), requires_grad=requires_grad)


def constant(data, dtype=np.float32) -> Tensor:
    """A leaf that never receives gradients."""
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=False)


def zeros(shape, requires_grad: bool = False, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def _make_node(values: np.ndarray, parents: Sequence[Tensor], backprop: Callable[[], None]) -> Tensor:
    needs = grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor(values, requires_grad=needs)
    if needs:
        out._parents = tuple(parents)
        out._backprop = backprop
    return out


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: operand shapes differ, {a.shape} vs {b.shape}")
    if a.dtype != b.dtype:
        raise ShapeError(f"{op}: operand dtypes differ, {a.dtype} vs {b.dtype}")


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    out_values = a.values + b.values

    def backprop():
        g = out.grad
        if a.requires_grad:
            a.ensure_grad()
            a.grad += g
        if b.requires_grad:
            b.ensure_grad()
            b.grad += g

    out = _make_node(out_values, (a, b), backprop)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    out_values = a.values - b.values

    def backprop():
        g = out.grad
        if a.requires_grad:
            a.ensure_grad()
            a.grad += g
        if b.requires_grad:
            b.ensure_grad()
            b.grad -= g

    out = _make_node(out_values, (a, b), backprop)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    out_values = a.values * b.values

    def backprop():
        g = out.grad
        if a.requires_grad:
            a.ensure_grad()
            a.grad += g * b.values
        if b.requires_grad:
            b.ensure_grad()
            b.grad += g * a.values

    out = _make_node(out_values, (a, b), backprop)
    return out


def abs_diff(a: Tensor, b: Tensor) -> Tensor:
    """|a - b| with the sign(0) = 0 subgradient convention."""
    _check_same_shape(a, b, "abs_diff")
    diff = a.values - b.values
    out_values = np.abs(diff)

    def backprop():
        g = out.grad * np.sign(diff)
        if a.requires_grad:
            a.ensure_grad()
            a.grad += g
        if b.requires_grad:
            b.ensure_grad()
            b.grad -= g

    out = _make_node(out_values, (a, b), backprop)
    return out


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "abs": abs_diff}


def elementwise(op: str, a: Tensor, b: Tensor) -> Tensor:
    """Dispatch over the supported binary elementwise ops.

    ``op`` is one of ``add``, ``sub``, ``mul``, ``abs`` (absolute
    difference).
    """
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}; expected one of {sorted(_ELEMENTWISE)}")
    return fn(a, b)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    c = float(c)
    out_values = a.values * a.dtype.type(c)

    def backprop():
        if a.requires_grad:
            a.ensure_grad()
            a.grad += out.grad * a.dtype.type(c)

    out = _make_node(out_values, (a,), backprop)
    return out


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------


def sigmoid(a: Tensor) -> Tensor:
    # 1/(1+exp(-x)) evaluated stably on both tails.
    x = a.values
    out_values = np.empty_like(x)
    pos = x >= 0
    out_values[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out_values[~pos] = ex / (1.0 + ex)

    def backprop():
        if a.requires_grad:
            a.ensure_grad()
            a.grad += out.grad * out_values * (1.0 - out_values)

    out = _make_node(out_values, (a,), backprop)
    return out


def tanh(a: Tensor) -> Tensor:
    out_values = np.tanh(a.values)

    def backprop():
        if a.requires_grad:
            a.ensure_grad()
            a.grad += out.grad * (1.0 - out_values * out_values)

    out = _make_node(out_values, (a,), backprop)
    return out


def relu(a: Tensor) -> Tensor:
    """max(0, x); relu'(0) = 0."""
    out_values = np.maximum(a.values, 0.0)

    def backprop():
        if a.requires_grad:
            a.ensure_grad()
            a.grad += out.grad * (a.values > 0)

    out = _make_node(out_values, (a,), backprop)
    return out


_ACTIVATIONS = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu}


def activation(op: str, a: Tensor) -> Tensor:
    try:
        fn = _ACTIVATIONS[op]
    except KeyError:
        raise ValueError(f"unknown activation {op!r}; expected one of {sorted(_ACTIVATIONS)}")
    return fn(a)


def softmax(z: Tensor) -> Tensor:
    """exp-normalize a rank-1 logit vector, with max subtraction.

    Output entries lie in [0, 1] and sum to 1. NaN inputs are rejected
    rather than propagated.
    """
    if z.values.ndim != 1:
        raise ShapeError(f"softmax expects a rank-1 tensor, got shape {z.shape}")
    if np.isnan(z.values).any():
        raise NumericError("softmax input contains NaN")
    shifted = z.values - np.max(z.values)
    e = np.exp(shifted)
    out_values = e / e.sum()

    def backprop():
        if z.requires_grad:
            g = out.grad
            z.ensure_grad()
            z.grad += out_values * (g - np.dot(g, out_values))

    out = _make_node(out_values, (z,), backprop)
    return out


# ---------------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two rank-2 tensors."""
    if a.values.ndim != 2 or b.values.ndim != 2:
        raise ShapeError(f"matmul expects rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} vs {b.shape}")
    out_values = a.values @ b.values

    def backprop():
        g = out.grad
        if a.requires_grad:
            a.ensure_grad()
            a.grad += g @ b.values.T
        if b.requires_grad:
            b.ensure_grad()
            b.grad += a.values.T @ g

    out = _make_node(out_values, (a, b), backprop)
    return out


def concat(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate rank-1 tensors in order; backward splits by offsets."""
    parts = list(parts)
    if not parts:
        raise ShapeError("concat of an empty list")
    for p in parts:
        if p.values.ndim != 1:
            raise ShapeError(f"concat expects rank-1 parts, got shape {p.shape}")
    out_values = np.concatenate([p.values for p in parts])
    offsets = np.cumsum([0] + [p.shape[0] for p in parts])

    def backprop():
        g = out.grad
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                p.ensure_grad()
                p.grad += g[lo:hi]

    out = _make_node(out_values, tuple(parts), backprop)
    return out


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate rank-2 tensors along columns (batched concat)."""
    parts = list(parts)
    if not parts:
        raise ShapeError("concat_cols of an empty list")
    rows = parts[0].shape[0]
    for p in parts:
        if p.values.ndim != 2 or p.shape[0] != rows:
            raise ShapeError(f"concat_cols: incompatible part shape {p.shape}")
    out_values = np.concatenate([p.values for p in parts], axis=1)
    offsets = np.cumsum([0] + [p.shape[1] for p in parts])

    def backprop():
        g = out.grad
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                p.ensure_grad()
                p.grad += g[:, lo:hi]

    out = _make_node(out_values, tuple(parts), backprop)
    return out


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    """Take columns [start, stop) of a rank-2 tensor."""
    if a.values.ndim != 2:
        raise ShapeError(f"slice_cols expects a rank-2 tensor, got shape {a.shape}")
    if not (0 <= start < stop <= a.shape[1]):
        raise ShapeError(f"slice_cols: range [{start}, {stop}) out of bounds for shape {a.shape}")
    out_values = a.values[:, start:stop].copy()

    def backprop():
        if a.requires_grad:
            a.ensure_grad()
            a.grad[:, start:stop] += out.grad

    out = _make_node(out_values, (a,), backprop)
    return out


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    if int(np.prod(shape, dtype=np.int64)) != a.values.size:
        raise ShapeError(f"reshape: cannot view shape {a.shape} as {shape}")
    out_values = a.values.reshape(shape).copy()

    def backprop():
        if a.requires_grad:
            a.ensure_grad()
            a.grad += out.grad.reshape(a.shape)

    out = _make_node(out_values, (a,), backprop)
    return out


def tile_rows(v: Tensor, rows: int) -> Tensor:
    """Replicate a rank-1 vector into `rows` identical rows.

    This is the explicit stand-in for broadcast bias addition; backward
    sums the incoming gradient over rows.
    """
    if v.values.ndim != 1:
        raise ShapeError(f"tile_rows expects a rank-1 tensor, got shape {v.shape}")
    if rows < 1:
        raise ShapeError(f"tile_rows: rows must be positive, got {rows}")
    out_values = np.tile(v.values, (rows, 1))

    def backprop():
        if v.requires_grad:
            v.ensure_grad()
            v.grad += out.grad.sum(axis=0)

    out = _make_node(out_values, (v,), backprop)
    return out


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows `ids` from a rank-2 table; backward scatter-adds."""
    if table.values.ndim != 2:
        raise ShapeError(f"embedding_lookup expects a rank-2 table, got shape {table.shape}")
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ShapeError(f"embedding_lookup expects rank-1 ids, got shape {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding id out of range [0, {table.shape[0]}): min={ids.min()}, max={ids.max()}")
    out_values = table.values[ids]

    def backprop():
        if table.requires_grad:
            table.ensure_grad()
            np.add.at(table.grad, ids, out.grad)

    out = _make_node(out_values, (table,), backprop)
    return out


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def sum_all(a: Tensor) -> Tensor:
    """Sum every element into a scalar (shape ())."""
    out_values = np.asarray(a.values.sum(), dtype=a.dtype)

    def backprop():
        if a.requires_grad:
            a.ensure_grad()
            a.grad += out.grad  # scalar broadcasts over the buffer

    out = _make_node(out_values, (a,), backprop)
    return out


def sum_last(a: Tensor) -> Tensor:
    """Sum over the last axis: rank-1 -> scalar, rank-2 [B,k] -> [B]."""
    if a.values.ndim not in (1, 2):
        raise ShapeError(f"sum_last expects rank-1 or rank-2, got shape {a.shape}")
    out_values = a.values.sum(axis=-1)

    def backprop():
        if a.requires_grad:
            a.ensure_grad()
            if a.values.ndim == 1:
                a.grad += out.grad
            else:
                a.grad += out.grad[:, None]

    out = _make_node(out_values, (a,), backprop)
    return out


def logsumexp_last(a: Tensor) -> Tensor:
    """log(sum(exp(.))) over the last axis, max-shifted for stability."""
    if a.values.ndim not in (1, 2):
        raise ShapeError(f"logsumexp_last expects rank-1 or rank-2, got shape {a.shape}")
    m = a.values.max(axis=-1, keepdims=True)
    e = np.exp(a.values - m)
    s = e.sum(axis=-1, keepdims=True)
    out_values = (np.log(s) + m).reshape(a.values.shape[:-1])
    soft = e / s  # softmax along the last axis, reused in backward

    def backprop():
        if a.requires_grad:
            a.ensure_grad()
            if a.values.ndim == 1:
                a.grad += out.grad * soft
            else:
                a.grad += out.grad[:, None] * soft

    out = _make_node(out_values, (a,), backprop)
    return out


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
    # Iterative post-order DFS; recursion would overflow on long LSTM chains.
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every requires_grad leaf.

    `loss` must be a scalar (a single-element tensor). Each graph node is
    visited exactly once, in reverse topological order. Running backward a
    second time on the same loss raises GraphError; rebuild the graph (or
    clear grads and re-run the forward pass) between steps.
    """
    if loss.values.size != 1:
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.shape}")
    if loss._backward_ran:
        raise GraphError("backward already ran on this graph; rebuild it before calling again")
    loss._backward_ran = True
    loss.ensure_grad()
    loss.grad += np.ones_like(loss.values)
    for node in reversed(_topo_order(loss)):
        if node._backprop is not None and node.grad is not None:
            node._backprop()


def parameters_zero_grad(params: Iterable[Tensor]) -> None:
    """Drop accumulated gradients on a collection of leaves."""
    for p in params:
        p.zero_grad()
