"""
Dense float64 tensors with tape-based reverse-mode differentiation.

Operations performed inside a ``with Tape():`` block on tensors that require
gradients are recorded on that tape; ``backward(loss)`` replays the tape in
reverse.  Outside of any tape (or inside ``no_grad()``) operations compute
values only.
"""
from __future__ import annotations

import contextlib
import dataclasses
import logging
import threading
from typing import Callable, Optional, Sequence, Union

import numpy as np

logger = logging.getLogger(__name__)

ArrayLike = Union["Tensor", np.ndarray, Sequence, float, int]
BackwardRule = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class ShapeError(ValueError):
    ...


class NumericError(ArithmeticError):
    ...


class TapeError(RuntimeError):
    ...


@dataclasses.dataclass
class Node:
    """One recorded operation: its id, inputs, output and backward rule."""
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: BackwardRule


class Tape:
    """
    Ordered record of operations for one forward pass.

    Nodes are appended as operations execute, so every node's inputs were
    produced before it (topological order).  A tape may be replayed once;
    ``reset()`` clears it for reuse.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.consumed = False

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: Node) -> None:
        if self.consumed:
            raise TapeError(
                "Cannot record on a tape that backward() already consumed; "
                "call reset() first"
            )
        self.nodes.append(node)

    def reset(self) -> None:
        self.nodes = []
        self.consumed = False

    def __enter__(self) -> Tape:
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc_info) -> None:
        _tape_stack().pop()


_local = threading.local()


def _tape_stack() -> list[Optional[Tape]]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape() -> Optional[Tape]:
    """The innermost tape of this thread, or None inside ``no_grad()``."""
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextlib.contextmanager
def no_grad():
    """Suspend recording, even inside an active tape."""
    stack = _tape_stack()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


class Tensor:
    """
    Row-major float64 array with an optional gradient.

    Parameters
    ----------
    data : array-like
        Values; copied and converted to float64.
    requires_grad : bool, optional
        Whether backward() should populate ``grad`` for this tensor.
    name : str, optional
        Used in checkpoints and error messages.
    """

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        name: Optional[str] = None,
    ):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.array(data, dtype=np.float64, order="C")
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.tape: Optional[Tape] = None

    @classmethod
    def _wrap(cls, data: np.ndarray) -> Tensor:
        out = cls.__new__(cls)
        out.data = np.ascontiguousarray(data, dtype=np.float64)
        out.requires_grad = False
        out.grad = None
        out.name = None
        out.tape = None
        return out

    @classmethod
    def parameter(cls, data: ArrayLike, name: Optional[str] = None) -> Tensor:
        return cls(data, requires_grad=True, name=name)

    @classmethod
    def zeros(cls, *shape: int, requires_grad: bool = False) -> Tensor:
        return cls(np.zeros(shape), requires_grad=requires_grad)

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
    def T(self) -> Tensor:
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        name = f" name={self.name!r}" if self.name else ""
        return (
            f"<Tensor shape={self.shape}{name} "
            f"requires_grad={self.requires_grad}>"
        )

    def __add__(self, other: ArrayLike) -> Tensor:
        return add(self, _as_tensor(other))

    def __radd__(self, other: ArrayLike) -> Tensor:
        return add(_as_tensor(other), self)

    def __sub__(self, other: ArrayLike) -> Tensor:
        return sub(self, _as_tensor(other))

    def __mul__(self, other: ArrayLike) -> Tensor:
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, _as_tensor(other))

    def __rmul__(self, other: ArrayLike) -> Tensor:
        return self.__mul__(other)

    def __neg__(self) -> Tensor:
        return scale(self, -1.0)

    def __matmul__(self, other: ArrayLike) -> Tensor:
        return matmul(self, _as_tensor(other))


def _as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(
    op: str,
    data: np.ndarray,
    inputs: Sequence[Tensor],
    backward_rule: BackwardRule,
) -> Tensor:
    """Wrap ``data`` and record the op if any input needs a gradient."""
    out = Tensor._wrap(data)
    tape = active_tape()
    if tape is not None and any(tensor.requires_grad for tensor in inputs):
        out.requires_grad = True
        out.tape = tape
        tape.record(Node(op, tuple(inputs), out, backward_rule))
    return out


def _accumulate(tensor: Tensor, grad: np.ndarray) -> None:
    if grad.shape != tensor.shape:
        raise ShapeError(
            f"Gradient shape {grad.shape} does not match tensor shape {tensor.shape}"
        )
    if tensor.grad is None:
        tensor.grad = np.array(grad, dtype=np.float64)
    else:
        tensor.grad += grad


def backward(loss: Tensor) -> None:
    """
    Populate ``grad`` of every tensor on the loss's tape that requires it.

    Leaf gradients accumulate across calls until ``zero_grad()``; the tape
    itself may be replayed only once.

    Raises
    ------
    TapeError
        If the loss is not a scalar, was not recorded on a tape, or its tape
        was already replayed or is empty.
    """
    if loss.size != 1:
        raise TapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    tape = loss.tape
    if tape is None:
        raise TapeError(
            "Loss was not recorded on a Tape; compute it inside `with Tape():`"
        )
    if tape.consumed:
        raise TapeError("backward() already ran on this tape; call reset() first")
    if not tape.nodes:
        raise TapeError("backward() called on an empty tape")

    for node in tape.nodes:
        node.output.grad = None
    loss.grad = np.ones_like(loss.data)

    for node in reversed(tape.nodes):
        grad = node.output.grad
        if grad is None:
            continue
        for tensor, input_grad in zip(node.inputs, node.backward(grad)):
            if input_grad is not None and tensor.requires_grad:
                _accumulate(tensor, input_grad)

    tape.consumed = True
    logger.debug("Replayed %d nodes", len(tape.nodes))


def _check_bias_shapes(op: str, a: Tensor, b: Tensor) -> None:
    """Equal shapes, or one operand matching the other's trailing axes."""
    short, long = sorted((a.shape, b.shape), key=len)
    if short != long[len(long) - len(short):]:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    leading = grad.ndim - len(shape)
    return grad.sum(axis=tuple(range(leading))).reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_bias_shapes("add", a, b)

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result("add", a.data + b.data, (a, b), rule)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_bias_shapes("sub", a, b)

    def rule(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _result("sub", a.data - b.data, (a, b), rule)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product (bias-style broadcast of the shorter operand)."""
    _check_bias_shapes("mul", a, b)

    def rule(g):
        return (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        )

    return _result("mul", a.data * b.data, (a, b), rule)


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return _result("scale", a.data * factor, (a, ), lambda g: (g * factor, ))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Matrix product over the last two axes.

    Leading (batch) axes must match, or one operand must be a plain matrix
    shared across the other's batch.

    Raises
    ------
    ShapeError
        On mismatched inner or batch dimensions; the message names both
        shapes.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch mismatch: {a.shape} @ {b.shape}")

    def rule(g):
        grad_a = np.matmul(g, np.swapaxes(b.data, -1, -2))
        grad_b = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)

    return _result("matmul", np.matmul(a.data, b.data), (a, b), rule)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.ndim < 2:
        raise ShapeError(f"transpose needs at least 2 axes, got {a.shape}")
    return _result(
        "transpose",
        np.swapaxes(a.data, -1, -2),
        (a, ),
        lambda g: (np.swapaxes(g, -1, -2), ),
    )


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    original = a.shape
    try:
        data = a.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"Cannot reshape {original} to {tuple(shape)}") from None
    return _result("reshape", data, (a, ), lambda g: (g.reshape(original), ))


def take_columns(a: Tensor, start: int, stop: int) -> Tensor:
    """``a[..., start:stop]``."""
    if not 0 <= start < stop <= a.shape[-1]:
        raise ShapeError(f"Column slice {start}:{stop} out of range for {a.shape}")

    def rule(g):
        full = np.zeros(a.shape)
        full[..., start:stop] = g
        return (full, )

    return _result("take_columns", a.data[..., start:stop], (a, ), rule)


def take_rows(a: Tensor, indices: Sequence[int]) -> Tensor:
    """``a[..., indices, :]`` (rows may repeat)."""
    indices = np.asarray(indices, dtype=np.int64)
    if a.ndim < 2:
        raise ShapeError(f"take_rows needs at least 2 axes, got {a.shape}")
    n_rows = a.shape[-2]
    if indices.size and (indices.min() < 0 or indices.max() >= n_rows):
        raise IndexError(f"Row indices {indices.tolist()} out of range [0, {n_rows})")

    def rule(g):
        full = np.zeros(a.shape)
        np.add.at(np.moveaxis(full, -2, 0), indices, np.moveaxis(g, -2, 0))
        return (full, )

    return _result("take_rows", a.data[..., indices, :], (a, ), rule)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    try:
        data = np.concatenate([tensor.data for tensor in tensors], axis=axis)
    except ValueError:
        shapes = [tensor.shape for tensor in tensors]
        raise ShapeError(f"Cannot concatenate shapes {shapes} on axis {axis}") from None
    bounds = np.cumsum([tensor.shape[axis] for tensor in tensors])[:-1]

    def rule(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result("concat", data, tensors, rule)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result("relu", np.where(mask, a.data, 0.0), (a, ), lambda g: (g * mask, ))


def softmax_rows(logits: Tensor) -> Tensor:
    """
    Softmax over the last axis, stabilized by subtracting the row maximum.

    Raises
    ------
    NumericError
        If any logit is NaN or infinite.
    """
    if not np.all(np.isfinite(logits.data)):
        raise NumericError(f"softmax_rows received non-finite logits (shape {logits.shape})")
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    exps = np.exp(shifted)
    probs = exps / exps.sum(axis=-1, keepdims=True)

    def rule(g):
        return (probs * (g - (g * probs).sum(axis=-1, keepdims=True)), )

    return _result("softmax_rows", probs, (logits, ), rule)


def sum(a: Tensor) -> Tensor:  # noqa: A001
    return _result(
        "sum", np.array(a.data.sum()), (a, ), lambda g: (np.full(a.shape, float(g)), )
    )


def mean(a: Tensor) -> Tensor:
    count = a.size
    return _result(
        "mean",
        np.array(a.data.mean()),
        (a, ),
        lambda g: (np.full(a.shape, float(g) / count), ),
    )


def embedding_lookup(table: Tensor, indices: np.ndarray) -> Tensor:
    """
    Rows of ``table`` selected by an integer array of any shape.

    Raises
    ------
    IndexError
        If any index is outside ``[0, table.shape[0])``.
    """
    indices = np.asarray(indices, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"Embedding table must be a matrix, got {table.shape}")
    n_rows = table.shape[0]
    if indices.size and (indices.min() < 0 or indices.max() >= n_rows):
        bad = indices[(indices < 0) | (indices >= n_rows)]
        raise IndexError(
            f"Embedding indices {sorted(set(bad.tolist()))} out of range [0, {n_rows})"
        )

    def rule(g):
        full = np.zeros(table.shape)
        np.add.at(full, indices, g)
        return (full, )

    return _result("embedding_lookup", table.data[indices], (table, ), rule)


def cross_entropy(
    logits: Tensor,
    labels: np.ndarray,
    mask: Optional[np.ndarray] = None,
) -> Tensor:
    """
    Mean negative log-likelihood of ``labels`` under ``softmax(logits)``.

    Parameters
    ----------
    logits : Tensor
        Shape ``(..., C)``.
    labels : numpy.ndarray
        Integer class ids with shape ``logits.shape[:-1]``.
    mask : numpy.ndarray, optional
        Boolean array shaped like ``labels``; False entries are excluded from
        the mean (and their labels are not validated).

    Raises
    ------
    IndexError
        If an unmasked label is outside ``[0, C)``.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n_classes = logits.shape[-1]
    if labels.shape != logits.shape[:-1]:
        raise ShapeError(
            f"cross_entropy labels shape {labels.shape} does not match logits {logits.shape}"
        )
    if mask is None:
        mask = np.ones(labels.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    active = labels[mask]
    if active.size and (active.min() < 0 or active.max() >= n_classes):
        raise IndexError(f"Labels {sorted(set(active.tolist()))} outside [0, {n_classes})")
    count = int(mask.sum())
    if count == 0:
        raise ValueError("cross_entropy mask excludes every position")

    safe_labels = np.where(mask, labels, 0)
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    log_probs = shifted - log_norm
    picked = np.take_along_axis(log_probs, safe_labels[..., None], axis=-1)[..., 0]
    loss = -(picked * mask).sum() / count

    def rule(g):
        grad = np.exp(log_probs)
        np.put_along_axis(
            grad,
            safe_labels[..., None],
            np.take_along_axis(grad, safe_labels[..., None], axis=-1) - 1.0,
            axis=-1,
        )
        return (grad * mask[..., None] * (float(g) / count), )

    return _result("cross_entropy", np.array(loss), (logits, ), rule)


def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance (no affine)."""
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
    normed = centered * inv_std

    def rule(g):
        grad = inv_std * (
            g
            - g.mean(axis=-1, keepdims=True)
            - normed * (g * normed).mean(axis=-1, keepdims=True)
        )
        return (grad, )

    return _result("layer_norm", normed, (x, ), rule)
