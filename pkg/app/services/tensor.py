"""Dense float64 tensors with reverse-mode differentiation.

Gradients are recorded on an explicit :class:`Tape`. A tensor created outside a tape
(``Tensor(data)``) is a constant; ``tape.watch(array)`` registers a leaf whose gradient
is wanted. Every op records itself on the tape its inputs belong to, so distinct tapes
can run on distinct threads without any shared state.

Only the broadcasting numpy already provides is supported, and every forward result is
checked for NaN/Inf.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from app.errors import (
    ContractError,
    DimensionError,
    EmbeddingIndexError,
    LabelIndexError,
    NonFiniteError,
)

logger = logging.getLogger(__name__)

DTYPE = np.float64

ArrayLike = Union[np.ndarray, float, int, Sequence[float]]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class Tensor:
    """An n-dimensional float64 array, optionally tracked by a tape."""

    __slots__ = ("data", "tape", "node_id")

    def __init__(self, data: ArrayLike, tape: Optional["Tape"] = None, node_id: Optional[int] = None):
        self.data = np.ascontiguousarray(data, dtype=DTYPE)
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        tracked = f", node={self.node_id}" if self.tracked else ""
        return f"Tensor(shape={self.shape}{tracked})"

    def __add__(self, other: "TensorLike") -> "Tensor":
        return add(self, other)

    def __radd__(self, other: "TensorLike") -> "Tensor":
        return add(other, self)

    def __sub__(self, other: "TensorLike") -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: "TensorLike") -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: "TensorLike") -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: "TensorLike") -> "Tensor":
        return mul(other, self)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


TensorLike = Union[Tensor, ArrayLike]


@dataclass(frozen=True)
class _Node:
    op: str
    inputs: Tuple[Optional[int], ...]
    backward: Optional[BackwardFn]
    shape: Tuple[int, ...]


class Gradients:
    """Result of a backward pass; unreachable tensors read as zeros."""

    def __init__(self, tape: "Tape", buffers: Dict[int, np.ndarray]):
        self._tape = tape
        self._buffers = buffers

    def __getitem__(self, tensor: Tensor) -> np.ndarray:
        if tensor.tape is not self._tape or tensor.node_id is None:
            raise ContractError("tensor was not recorded on this tape")
        grad = self._buffers.get(tensor.node_id)
        if grad is None:
            return np.zeros(tensor.shape, dtype=DTYPE)
        return grad

    def __contains__(self, tensor: Tensor) -> bool:
        return tensor.tape is self._tape and tensor.node_id in self._buffers


class Tape:
    """Append-only record of ops; node ids are positions, so inputs always precede."""

    def __init__(self) -> None:
        self.nodes: List[_Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def watch(self, value: TensorLike) -> Tensor:
        """Register ``value`` as a leaf whose gradient will be collected."""
        data = value.data if isinstance(value, Tensor) else value
        tensor = Tensor(data)
        _check_finite("leaf", tensor.data)
        tensor.tape = self
        tensor.node_id = len(self.nodes)
        self.nodes.append(_Node("leaf", (), None, tensor.shape))
        return tensor

    def record(self, op: str, inputs: Sequence[Tensor], data: np.ndarray, backward: BackwardFn) -> Tensor:
        ids = tuple(t.node_id if t.tape is self else None for t in inputs)
        out = Tensor(data, tape=self, node_id=len(self.nodes))
        self.nodes.append(_Node(op, ids, backward, out.shape))
        return out

    def backward(self, root: Tensor) -> Gradients:
        """Accumulate d(root)/d(node) for every node, visiting each node once in reverse."""
        if root.tape is not self or root.node_id is None:
            raise ContractError("backward root was not produced on this tape")
        if root.size != 1:
            raise ContractError(f"backward root must be a scalar, got shape {root.shape}")

        buffers: Dict[int, np.ndarray] = {root.node_id: np.ones(root.shape, dtype=DTYPE)}
        for node_id in range(root.node_id, -1, -1):
            grad = buffers.get(node_id)
            node = self.nodes[node_id]
            if grad is None or node.backward is None:
                continue
            input_grads = node.backward(grad)
            for input_id, input_grad in zip(node.inputs, input_grads):
                if input_id is None or input_grad is None:
                    continue
                if input_id in buffers:
                    buffers[input_id] = buffers[input_id] + input_grad
                else:
                    buffers[input_id] = np.asarray(input_grad, dtype=DTYPE)
        return Gradients(self, buffers)


def backward(tape: Tape, root: Tensor) -> Gradients:
    return tape.backward(root)


# Plumbing


def as_tensor(value: TensorLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _check_finite(op: str, data: np.ndarray) -> None:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced a non-finite value", op=op)


def _tape_of(inputs: Sequence[Tensor]) -> Optional[Tape]:
    tape = None
    for t in inputs:
        if t.tape is None:
            continue
        if tape is not None and t.tape is not tape:
            raise ContractError("inputs are recorded on different tapes")
        tape = t.tape
    return tape


def _emit(op: str, inputs: Sequence[Tensor], data: np.ndarray, backward_fn: BackwardFn) -> Tensor:
    _check_finite(op, data)
    tape = _tape_of(inputs)
    if tape is None:
        return Tensor(data)
    return tape.record(op, inputs, data, backward_fn)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


# Elementwise


def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit("add", (a, b), a.data + b.data, grad_fn)


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _emit("sub", (a, b), a.data - b.data, grad_fn)


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _emit("mul", (a, b), a.data * b.data, grad_fn)


def scale(a: TensorLike, factor: float) -> Tensor:
    a = as_tensor(a)

    def grad_fn(g):
        return (g * factor,)

    return _emit("scale", (a,), a.data * factor, grad_fn)


def relu(x: TensorLike) -> Tensor:
    """max(0, x); the subgradient at 0 is 0."""
    x = as_tensor(x)
    active = x.data > 0

    def grad_fn(g):
        return (g * active,)

    return _emit("relu", (x,), np.where(active, x.data, 0.0), grad_fn)


# Reductions and shape ops


def sum_all(x: TensorLike) -> Tensor:
    x = as_tensor(x)

    def grad_fn(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _emit("sum", (x,), np.asarray(x.data.sum()), grad_fn)


def mean_all(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    count = max(x.size, 1)

    def grad_fn(g):
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _emit("mean", (x,), np.asarray(x.data.sum() / count), grad_fn)


def reshape(x: TensorLike, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        data = x.data.reshape(tuple(shape))
    except ValueError:
        raise DimensionError(f"cannot reshape {x.shape} into {tuple(shape)}")

    def grad_fn(g):
        return (g.reshape(x.shape),)

    return _emit("reshape", (x,), data, grad_fn)


def transpose(x: TensorLike, axes: Optional[Sequence[int]] = None) -> Tensor:
    """Permute axes; by default swap the last two."""
    x = as_tensor(x)
    if axes is None:
        if x.ndim < 2:
            raise DimensionError(f"transpose needs at least 2 dims, got {x.shape}")
        axes = list(range(x.ndim - 2)) + [x.ndim - 1, x.ndim - 2]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def grad_fn(g):
        return (np.transpose(g, inverse),)

    return _emit("transpose", (x,), np.transpose(x.data, axes), grad_fn)


def concat(tensors: Sequence[TensorLike], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat needs at least one tensor")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise DimensionError(f"concat: {e}")
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concat", tensors, data, grad_fn)


def take(x: TensorLike, indices: np.ndarray, axis: int = 0) -> Tensor:
    """Gather slices of ``x`` along ``axis``; repeated indices accumulate gradient."""
    x = as_tensor(x)
    indices = np.asarray(indices, dtype=np.intp)
    axis = axis % x.ndim

    def grad_fn(g):
        grad = np.zeros(x.shape, dtype=DTYPE)
        moved = np.moveaxis(grad, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        return (grad,)

    return _emit("take", (x,), np.take(x.data, indices, axis=axis), grad_fn)


def embedding_lookup(table: TensorLike, codes: np.ndarray) -> Tensor:
    """Row lookup in ``table``; code -1 selects the frozen all-zero padding row.

    The padding row is not part of ``table``: it never receives a gradient and can
    never drift away from zero.
    """
    table = as_tensor(table)
    codes = np.asarray(codes, dtype=np.intp)
    rows = table.shape[0]
    if np.any(codes >= rows) or np.any(codes < -1):
        bad = codes[(codes >= rows) | (codes < -1)]
        raise EmbeddingIndexError(f"embedding code {int(bad[0])} outside [0, {rows})", rows=rows)
    padding = codes < 0
    safe = np.where(padding, 0, codes)
    if rows:
        data = table.data[safe]
    else:
        data = np.zeros(codes.shape + table.shape[1:], dtype=DTYPE)
    data[padding] = 0.0

    def grad_fn(g):
        grad = np.zeros(table.shape, dtype=DTYPE)
        keep = ~padding
        np.add.at(grad, codes[keep], g[keep])
        return (grad,)

    return _emit("embedding", (table,), data, grad_fn)


# Linear algebra


def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    """Matrix product over the last two axes, leading axes broadcast like numpy."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul batch dimensions do not broadcast: {a.shape} x {b.shape}")

    def grad_fn(g):
        grad_a = np.matmul(g, np.swapaxes(b.data, -1, -2))
        grad_b = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)

    return _emit("matmul", (a, b), data, grad_fn)


# Normalisation and losses


def _blocked_grid(shape: Tuple[int, ...], column_blocked: Optional[np.ndarray]) -> np.ndarray:
    if column_blocked is None:
        return np.zeros(shape, dtype=bool)
    blocked = np.asarray(column_blocked, dtype=bool)
    if blocked.shape[-1] != shape[-1]:
        raise DimensionError(f"column mask of length {blocked.shape[-1]} for rows of length {shape[-1]}")
    try:
        return np.broadcast_to(blocked[..., None, :], shape)
    except ValueError:
        raise DimensionError(f"column mask {blocked.shape} does not fit scores {shape}")


def softmax_rows(x: TensorLike, column_blocked: Optional[np.ndarray] = None) -> Tensor:
    """Softmax along the last axis, excluding blocked columns.

    ``column_blocked`` has shape ``x.shape[:-2] + (n,)`` (or anything broadcastable to
    it) and is shared by every row of the same matrix. Blocked entries are exactly 0;
    a row with every column blocked is all zeros.
    """
    x = as_tensor(x)
    if x.ndim < 2:
        raise DimensionError(f"softmax_rows needs at least 2 dims, got {x.shape}")
    blocked = _blocked_grid(x.shape, column_blocked)

    row_max = np.where(blocked, -np.inf, x.data).max(axis=-1, keepdims=True)
    row_max = np.where(np.isfinite(row_max), row_max, 0.0)
    shifted = np.where(blocked, 0.0, x.data - row_max)
    weights = np.where(blocked, 0.0, np.exp(shifted))
    denom = weights.sum(axis=-1, keepdims=True)
    out = np.where(denom > 0, weights / np.where(denom > 0, denom, 1.0), 0.0)

    def grad_fn(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - inner),)

    return _emit("softmax", (x,), out, grad_fn)


def layer_norm(x: TensorLike, gain: TensorLike, bias: TensorLike, eps: float = 1e-5) -> Tensor:
    """(x - mean) / sqrt(var + eps) * gain + bias over the last axis."""
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    width = x.shape[-1]
    if gain.shape != (width,) or bias.shape != (width,):
        raise DimensionError(f"layer_norm parameters must have shape ({width},)")

    centered = x.data - x.data.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered**2).mean(axis=-1, keepdims=True) + eps)
    normed = centered * inv_std

    def grad_fn(g):
        reduce_axes = tuple(range(g.ndim - 1))
        grad_gain = (g * normed).sum(axis=reduce_axes)
        grad_bias = g.sum(axis=reduce_axes)
        gn = g * gain.data
        grad_x = inv_std * (
            gn
            - gn.mean(axis=-1, keepdims=True)
            - normed * (gn * normed).mean(axis=-1, keepdims=True)
        )
        return grad_x, grad_gain, grad_bias

    return _emit("layer_norm", (x, gain, bias), normed * gain.data + bias.data, grad_fn)


def cross_entropy_logits(logits: TensorLike, labels: Sequence[int]) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label], via log-sum-exp."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy_logits expects (batch, classes), got {logits.shape}")
    batch, classes = logits.shape
    labels = np.asarray(labels, dtype=np.intp)
    if labels.shape != (batch,):
        raise DimensionError(f"{labels.shape[0] if labels.ndim else 0} labels for a batch of {batch}")
    if batch and (labels.min() < 0 or labels.max() >= classes):
        raise LabelIndexError(f"labels must lie in [0, {classes})")

    row_max = logits.data.max(axis=-1, keepdims=True) if batch else np.zeros((0, 1))
    exp = np.exp(logits.data - row_max)
    sums = exp.sum(axis=-1, keepdims=True)
    log_sum_exp = (row_max + np.log(sums))[:, 0]
    picked = logits.data[np.arange(batch), labels]
    loss = (log_sum_exp - picked).sum() / max(batch, 1)

    def grad_fn(g):
        probs = exp / sums
        probs[np.arange(batch), labels] -= 1.0
        return (probs * (g / max(batch, 1)),)

    return _emit("cross_entropy", (logits,), np.asarray(loss), grad_fn)


# Initialisation and checking


def glorot_uniform(
    shape: Sequence[int], fan_in: int, fan_out: int, rng: np.random.Generator
) -> Tensor:
    """I.i.d. uniform on [-sqrt(6/(fan_in+fan_out)), +sqrt(6/(fan_in+fan_out))]."""
    if fan_in <= 0 or fan_out <= 0:
        raise ContractError(f"glorot fans must be positive, got {fan_in}, {fan_out}")
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=tuple(shape)))


def finite_difference_check(
    f: Callable[[Tensor], Tensor], x: ArrayLike, step: float = 1e-5
) -> float:
    """Max over coordinates of |g_ad - g_fd| / max(1, |g_ad|, |g_fd|).

    ``g_fd`` uses central differences with the given step; ``g_ad`` comes from a tape.
    """
    if step <= 0:
        raise ContractError("finite-difference step must be positive")
    base = np.array(x, dtype=DTYPE)

    tape = Tape()
    leaf = tape.watch(base)
    analytic = tape.backward(f(leaf))[leaf].reshape(-1)

    flat = base.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        plus, minus = flat.copy(), flat.copy()
        plus[i] += step
        minus[i] -= step
        numeric = (
            f(Tensor(plus.reshape(base.shape))).item() - f(Tensor(minus.reshape(base.shape))).item()
        ) / (2.0 * step)
        err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]), abs(numeric))
        worst = max(worst, err)
    return worst
