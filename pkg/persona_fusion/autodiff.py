"""Reverse-mode automatic differentiation over numpy arrays.

Every primitive applied while a :class:`Tape` is active is appended to that tape
together with a closure that maps the output gradient to input gradients.
:func:`backward` walks the tape in reverse order, so a single pass visits each
recorded node once and accumulates gradients for tensors used several times.

Outside an active tape the same operations run as plain numpy computations and
record nothing, which is how evaluation and finite-difference probes run.
"""

from __future__ import annotations

import contextvars
import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from typing import Any

import numpy as np
from scipy.special import expit

logger = logging.getLogger(__name__)

BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]

_ACTIVE_TAPE: contextvars.ContextVar[Tape | None] = contextvars.ContextVar("active_tape", default=None)


class TapeError(RuntimeError):
    """Raised when a loss cannot be differentiated on the given tape."""


@dataclass
class Node:
    """One recorded primitive application."""

    output: Tensor
    inputs: tuple[Tensor, ...]
    backward: BackwardFn
    op: str


class Tape:
    """Ordered record of primitive applications (a Wengert list).

    Use as a context manager; tensors computed inside the block are recorded.
    Nodes are appended in execution order, so every node's inputs precede it.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self._tokens: list[contextvars.Token] = []

    def __enter__(self) -> Tape:
        self._tokens.append(_ACTIVE_TAPE.set(self))
        return self

    def __exit__(self, *exc_info: Any) -> None:
        _ACTIVE_TAPE.reset(self._tokens.pop())

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, output: Tensor, inputs: tuple[Tensor, ...], backward_fn: BackwardFn, op: str) -> None:
        output.tape_id = len(self.nodes)
        output._tape = self
        self.nodes.append(Node(output=output, inputs=inputs, backward=backward_fn, op=op))


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE.get()


class Tensor:
    """An n-dimensional array that can take part in reverse-mode differentiation.

    Attributes:
        values: Row-major floating-point array (float64 unless built from float32 data)
        grad: Gradient slot with the shape of ``values``; filled by :func:`backward`
        requires_grad: Whether gradients flow into this tensor
        tape_id: Index of the node that produced this tensor on its tape, None for leaves
    """

    __array_priority__ = 1000

    def __init__(self, values: Any, requires_grad: bool = False, name: str | None = None):
        arr = np.array(values, copy=True)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.values: np.ndarray = np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self.tape_id: int | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.values.dtype

    def __len__(self) -> int:
        return self.values.shape[0]

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    def item(self) -> float:
        if self.values.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.values

    def detach(self) -> Tensor:
        """Return a copy that is cut off from the tape and never receives gradient."""
        return Tensor(self.values, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.values)

    # arithmetic
    def __add__(self, other: Any) -> Tensor:
        return add(self, other)

    def __radd__(self, other: Any) -> Tensor:
        return add(other, self)

    def __sub__(self, other: Any) -> Tensor:
        return sub(self, other)

    def __rsub__(self, other: Any) -> Tensor:
        return sub(other, self)

    def __mul__(self, other: Any) -> Tensor:
        return mul(self, other)

    def __rmul__(self, other: Any) -> Tensor:
        return mul(other, self)

    def __truediv__(self, other: Any) -> Tensor:
        return div(self, other)

    def __rtruediv__(self, other: Any) -> Tensor:
        return div(other, self)

    def __neg__(self) -> Tensor:
        return neg(self)

    def __matmul__(self, other: Any) -> Tensor:
        return matmul(self, other)

    def __rmatmul__(self, other: Any) -> Tensor:
        return matmul(other, self)

    def __getitem__(self, index: Any) -> Tensor:
        return getitem(self, index)

    def __pow__(self, exponent: float) -> Tensor:
        return power(self, exponent)

    # shape and reductions
    def sum(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape: int) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], tuple | list):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes: int) -> Tensor:
        return transpose(self, axes or None)

    @property
    def T(self) -> Tensor:  # noqa: N802
        return transpose(self, None)

    # elementwise functions
    def exp(self) -> Tensor:
        return exp(self)

    def log(self) -> Tensor:
        return log(self)

    def tanh(self) -> Tensor:
        return tanh(self)

    def sigmoid(self) -> Tensor:
        return sigmoid(self)

    def relu(self) -> Tensor:
        return relu(self)


def as_tensor(value: Any) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def record_op(values: np.ndarray, inputs: Sequence[Tensor], backward_fn: BackwardFn, op: str) -> Tensor:
    """Wrap ``values`` as the output of a primitive and record it when a tape is active.

    Nothing is recorded when no tape is active or when no input requires gradient.
    """
    out = Tensor.__new__(Tensor)
    out.values = values if isinstance(values, np.ndarray) else np.asarray(values)
    out.grad = None
    out.name = None
    out.tape_id = None
    out._tape = None
    tape = _ACTIVE_TAPE.get()
    tracked = any(t.requires_grad for t in inputs)
    out.requires_grad = tracked and tape is not None
    if out.requires_grad and tape is not None:
        tape.record(out, tuple(inputs), backward_fn, op)
    return out


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` over the axes that numpy broadcasting added or stretched."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    stretched = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if stretched:
        grad = grad.sum(axis=stretched, keepdims=True)
    return grad.reshape(shape)


def backward(tape: Tape, loss: Tensor, params: Sequence[Tensor] | None = None) -> None:
    """Populate ``grad`` on every leaf tensor that the scalar ``loss`` depends on.

    Leaf gradients are reset to zero first, so parameters listed in ``params`` that
    do not contribute to ``loss`` end up holding zeros.

    Raises:
        TapeError: If ``loss`` was not recorded on ``tape``
        ValueError: If ``loss`` is not a scalar
    """
    if loss.tape_id is None or loss._tape is not tape:
        raise TapeError("loss is not recorded on this tape")
    if loss.values.size != 1:
        raise ValueError(f"loss must be a scalar, got shape {loss.shape}")

    leaves: dict[int, Tensor] = {}
    for param in params or ():
        leaves[id(param)] = param
    for node in tape.nodes[: loss.tape_id + 1]:
        for parent in node.inputs:
            if parent.requires_grad and parent._tape is not tape:
                leaves.setdefault(id(parent), parent)
    for leaf in leaves.values():
        leaf.zero_grad()

    grads: dict[int, np.ndarray] = {loss.tape_id: np.ones_like(loss.values)}
    for index in range(loss.tape_id, -1, -1):
        grad = grads.pop(index, None)
        if grad is None:
            continue
        node = tape.nodes[index]
        for parent, parent_grad in zip(node.inputs, node.backward(grad), strict=True):
            if parent_grad is None or not parent.requires_grad:
                continue
            if parent._tape is tape and parent.tape_id is not None:
                previous = grads.get(parent.tape_id)
                grads[parent.tape_id] = parent_grad if previous is None else previous + parent_grad
            else:
                parent.grad = parent_grad if parent.grad is None else parent.grad + parent_grad


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def add(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record_op(
        a.values + b.values,
        (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)),
        "add",
    )


def sub(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record_op(
        a.values - b.values,
        (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record_op(
        a.values * b.values,
        (a, b),
        lambda g: (unbroadcast(g * b.values, a.shape), unbroadcast(g * a.values, b.shape)),
        "mul",
    )


def div(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record_op(
        a.values / b.values,
        (a, b),
        lambda g: (
            unbroadcast(g / b.values, a.shape),
            unbroadcast(-g * a.values / (b.values * b.values), b.shape),
        ),
        "div",
    )


def neg(a: Tensor) -> Tensor:
    return record_op(-a.values, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, exponent: float) -> Tensor:
    return record_op(
        a.values**exponent,
        (a,),
        lambda g: (g * exponent * a.values ** (exponent - 1),),
        "power",
    )


def matmul(a: Any, b: Any) -> Tensor:
    """Matrix product with numpy ``matmul`` semantics, including 1-D operands and batch axes."""
    a, b = as_tensor(a), as_tensor(b)
    a2 = a.values[None, :] if a.ndim == 1 else a.values
    b2 = b.values[:, None] if b.ndim == 1 else b.values
    out2 = a2 @ b2
    out = out2
    if a.ndim == 1:
        out = out.squeeze(-2)
    if b.ndim == 1:
        out = out.squeeze(-1)

    def _backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        g2 = g.reshape(out2.shape)
        grad_a = unbroadcast(g2 @ np.swapaxes(b2, -1, -2), a2.shape).reshape(a.shape)
        grad_b = unbroadcast(np.swapaxes(a2, -1, -2) @ g2, b2.shape).reshape(b.shape)
        return grad_a, grad_b

    return record_op(out, (a, b), _backward, "matmul")


def tsum(a: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    def _backward(g: np.ndarray) -> tuple[np.ndarray]:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return record_op(np.sum(a.values, axis=axis, keepdims=keepdims), (a,), _backward, "sum")


def mean(a: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.values.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.values)
    return record_op(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return record_op(np.log(a.values), (a,), lambda g: (g / a.values,), "log")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.values)
    return record_op(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a: Tensor) -> Tensor:
    out = expit(a.values)
    return record_op(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a: Tensor) -> Tensor:
    positive = a.values > 0
    return record_op(np.where(positive, a.values, 0.0), (a,), lambda g: (g * positive,), "relu")


def softplus(a: Tensor) -> Tensor:
    """log(1 + e^x), computed without overflow."""
    return record_op(np.logaddexp(0.0, a.values), (a,), lambda g: (g * expit(a.values),), "softplus")


def gelu(a: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh approximation."""
    x = a.values
    k = np.sqrt(2.0 / np.pi)
    inner = k * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def _backward(g: np.ndarray) -> tuple[np.ndarray]:
        d_inner = k * (1.0 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner),)

    return record_op(out, (a,), _backward, "gelu")


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    return record_op(a.values.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    inverse = None if axes is None else tuple(np.argsort(axes))
    return record_op(np.transpose(a.values, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def _is_basic_index(index: Any) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, int | slice | type(None) | type(Ellipsis)) for p in parts)


def getitem(a: Tensor, index: Any) -> Tensor:
    basic = _is_basic_index(index)

    def _backward(g: np.ndarray) -> tuple[np.ndarray]:
        full = np.zeros_like(a.values)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return record_op(a.values[index], (a,), _backward, "getitem")


def take_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Embedding lookup: gather rows of a 2-D ``table`` for an integer array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValueError(f"id out of range for table with {table.shape[0]} rows")

    def _backward(g: np.ndarray) -> tuple[np.ndarray]:
        full = np.zeros_like(table.values)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return record_op(table.values[ids], (table,), _backward, "take_rows")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def _backward(g: np.ndarray) -> list[np.ndarray]:
        return np.split(g, bounds, axis=axis)

    return record_op(np.concatenate([t.values for t in tensors], axis=axis), tuple(tensors), _backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def _backward(g: np.ndarray) -> list[np.ndarray]:
        return [np.take(g, i, axis=axis) for i in range(len(tensors))]

    return record_op(np.stack([t.values for t in tensors], axis=axis), tuple(tensors), _backward, "stack")


def where(condition: np.ndarray, a: Any, b: Any) -> Tensor:
    """Select from ``a`` where the constant boolean ``condition`` holds, else from ``b``."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(condition, dtype=bool)
    return record_op(
        np.where(cond, a.values, b.values),
        (a, b),
        lambda g: (unbroadcast(np.where(cond, g, 0.0), a.shape), unbroadcast(np.where(cond, 0.0, g), b.shape)),
        "where",
    )


def masked_max(a: Tensor, mask: np.ndarray, axis: int) -> Tensor:
    """Maximum along ``axis`` over positions where ``mask`` is true; masked positions never win."""
    valid = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    if not valid.any(axis=axis).all():
        raise ValueError("masked max over an empty support")
    filled = np.where(valid, a.values, -np.inf)
    winners = np.expand_dims(np.argmax(filled, axis=axis), axis)
    out = np.take_along_axis(a.values, winners, axis=axis).squeeze(axis)

    def _backward(g: np.ndarray) -> tuple[np.ndarray]:
        full = np.zeros_like(a.values)
        np.put_along_axis(full, winners, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return record_op(out, (a,), _backward, "masked_max")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.values - a.values.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    probs = np.exp(out)
    return record_op(out, (a,), lambda g: (g - probs * g.sum(axis=axis, keepdims=True),), "log_softmax")


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------


def gradient_check(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    epsilon: float = 1e-6,
    max_coordinates: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare analytic gradients of a scalar function with central differences.

    Args:
        fn: Zero-argument callable rebuilding the scalar loss from the current values of ``inputs``
        inputs: Leaf tensors to probe; they must have ``requires_grad`` set
        epsilon: Finite-difference step in [1e-6, 1e-4]
        max_coordinates: Probe at most this many coordinates per input (sampled with ``rng``)
        rng: Generator used for coordinate sampling

    Returns:
        Max over probed coordinates of |analytic - numeric| / max(1, |analytic|, |numeric|)
    """
    if not 1e-6 <= epsilon <= 1e-4:
        raise ValueError(f"epsilon must lie in [1e-6, 1e-4], got {epsilon}")

    with Tape() as tape:
        loss = fn()
    if not np.all(np.isfinite(loss.values)):
        raise ValueError("function under test returned a non-finite value")
    backward(tape, loss, params=inputs)
    analytic = [np.asarray(t.grad).reshape(-1).copy() for t in inputs]

    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for tensor, grads in zip(inputs, analytic, strict=True):
        flat = tensor.values.reshape(-1)
        coordinates = np.arange(flat.size)
        if max_coordinates is not None and flat.size > max_coordinates:
            coordinates = np.sort(rng.choice(flat.size, size=max_coordinates, replace=False))
        for i in coordinates:
            original = flat[i]
            flat[i] = original + epsilon
            plus = float(fn().values)
            flat[i] = original - epsilon
            minus = float(fn().values)
            flat[i] = original
            if not (np.isfinite(plus) and np.isfinite(minus)):
                raise ValueError("function under test returned a non-finite value")
            numeric = (plus - minus) / (2.0 * epsilon)
            error = abs(grads[i] - numeric) / max(1.0, abs(grads[i]), abs(numeric))
            worst = max(worst, error)
    logger.debug(f"Gradient check over {len(inputs)} inputs: max relative error {worst:.3e}")
    return worst
