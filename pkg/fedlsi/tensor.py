"""Dense tensors with reverse-mode gradient recording.

Values are float64 numpy arrays. Ops executed while a ``ComputationTape`` is
active and at least one input requires gradients are appended to the tape in
execution order, which is a valid topological order for the reverse pass.
"""

from __future__ import annotations

import contextvars
import itertools
import logging
from collections.abc import Callable, Iterator, Sequence
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Any

import numpy as np
from scipy.special import expit, logsumexp

from .const import GRAD_CHECK_FLOOR, GRAD_CHECK_STEP
from .errors import NonFiniteError, TensorError

_LOGGER = logging.getLogger(__name__)

_TENSOR_IDS = itertools.count()
_ACTIVE_TAPE: contextvars.ContextVar[ComputationTape | None] = contextvars.ContextVar(
    "fedlsi_active_tape", default=None
)

BackwardFn = Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


class Tensor:
    """Dense float64 array with an optional accumulated gradient."""

    __slots__ = ("data", "grad", "requires_grad", "uid")
    __array_ufunc__ = None

    def __init__(self, values: Any, requires_grad: bool = False) -> None:
        """Initialize from any array-like, copying the values."""
        data = np.array(values, dtype=np.float64)
        _check_values(data, "tensor")
        self.data: np.ndarray = data
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.uid = next(_TENSOR_IDS)

    @classmethod
    def _from_op(cls, data: np.ndarray, requires_grad: bool, op: str) -> Tensor:
        """Wrap an op result without copying."""
        data = np.asarray(data)
        _check_values(data, op)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = requires_grad
        out.uid = next(_TENSOR_IDS)
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        """Return the tensor shape."""
        return self.data.shape

    @property
    def ndim(self) -> int:
        """Return the number of dimensions."""
        return self.data.ndim

    @property
    def size(self) -> int:
        """Return the number of scalar values."""
        return int(self.data.size)

    @property
    def T(self) -> Tensor:  # noqa: N802
        """Return the transpose of a 2-D tensor."""
        return transpose(self)

    def item(self) -> float:
        """Return the value of a single-element tensor."""
        if self.data.size != 1:
            raise TensorError(f"item() needs a single value, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        """Return a copy of the values."""
        return self.data.copy()

    def detach(self) -> Tensor:
        """Return a constant copy that never records on a tape."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        """Drop the accumulated gradient."""
        self.grad = None

    def __deepcopy__(self, memo: dict[int, Any]) -> Tensor:
        clone = Tensor(self.data, requires_grad=self.requires_grad)
        clone.grad = None if self.grad is None else self.grad.copy()
        memo[id(self)] = clone
        return clone

    def sum(self, axis: int | None = None, keepdims: bool = False) -> Tensor:
        """Sum over an axis, or over everything."""
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: int | None = None, keepdims: bool = False) -> Tensor:
        """Average over an axis, or over everything."""
        return tensor_mean(self, axis=axis, keepdims=keepdims)

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

    def __neg__(self) -> Tensor:
        return mul(self, -1.0)

    def __matmul__(self, other: Any) -> Tensor:
        return matmul(self, other)

    def __pow__(self, exponent: float) -> Tensor:
        return power(self, exponent)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


@dataclass(slots=True)
class TapeNode:
    """One recorded op: inputs, output and the closure holding saved activations.

    ``tracked`` holds each input's ``requires_grad`` at record time.
    """

    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn
    tracked: tuple[bool, ...]


class ComputationTape:
    """Ordered record of differentiable ops.

    Use as a context manager; ops run inside the block are recorded when any
    of their inputs requires gradients.
    """

    def __init__(self) -> None:
        """Initialize an empty tape."""
        self.nodes: list[TapeNode] = []
        self._outputs: set[int] = set()
        self._tokens: list[contextvars.Token[ComputationTape | None]] = []

    def __enter__(self) -> ComputationTape:
        self._tokens.append(_ACTIVE_TAPE.set(self))
        return self

    def __exit__(self, *exc_info: object) -> None:
        _ACTIVE_TAPE.reset(self._tokens.pop())

    def __len__(self) -> int:
        return len(self.nodes)

    def __contains__(self, tensor: object) -> bool:
        return isinstance(tensor, Tensor) and tensor.uid in self._outputs

    def record(self, node: TapeNode) -> None:
        """Append a node."""
        self.nodes.append(node)
        self._outputs.add(node.output.uid)


@contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording for the enclosed block."""
    token = _ACTIVE_TAPE.set(None)
    try:
        yield
    finally:
        _ACTIVE_TAPE.reset(token)


def _check_values(data: np.ndarray, op: str) -> None:
    if any(dim <= 0 for dim in data.shape):
        raise TensorError(f"{op}: dimensions must be positive, got {data.shape}")
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op}: non-finite value produced")


def as_tensor(value: Any) -> Tensor:
    """Return ``value`` unchanged when it is a tensor, else a constant."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _emit(
    op: str, inputs: tuple[Tensor, ...], data: np.ndarray, backward_fn: BackwardFn
) -> Tensor:
    tape = _ACTIVE_TAPE.get()
    flags = tuple(t.requires_grad for t in inputs)
    tracked = tape is not None and any(flags)
    out = Tensor._from_op(data, tracked, op)
    if tracked and tape is not None:
        tape.record(TapeNode(op, inputs, out, backward_fn, flags))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as err:
        raise TensorError(f"{op}: shape mismatch {a.shape} vs {b.shape}") from err


def add(a: Any, b: Any) -> Tensor:
    """Elementwise sum with broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return _emit(
        "add",
        (a, b),
        a.data + b.data,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Any, b: Any) -> Tensor:
    """Elementwise difference with broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return _emit(
        "sub",
        (a, b),
        a.data - b.data,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: Any, b: Any) -> Tensor:
    """Elementwise product with broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return _emit(
        "mul",
        (a, b),
        a.data * b.data,
        lambda g: (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        ),
    )


def div(a: Any, b: Any) -> Tensor:
    """Elementwise quotient with broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    return _emit(
        "div",
        (a, b),
        a.data / b.data,
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def power(a: Any, exponent: float) -> Tensor:
    """Raise every value to a constant exponent."""
    a = as_tensor(a)
    return _emit(
        "pow",
        (a,),
        np.power(a.data, exponent),
        lambda g: (g * exponent * np.power(a.data, exponent - 1),),
    )


def matmul(a: Any, b: Any) -> Tensor:
    """Matrix product of two 2-D tensors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise TensorError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    return _emit(
        "matmul",
        (a, b),
        a.data @ b.data,
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


def transpose(a: Tensor) -> Tensor:
    """Transpose a 2-D tensor."""
    if a.ndim != 2:
        raise TensorError(f"transpose: expected 2-D, got {a.shape}")
    return _emit("transpose", (a,), a.data.T.copy(), lambda g: (g.T,))


def tensor_sum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    """Sum over an axis, or over everything."""

    def backward_fn(g: np.ndarray) -> tuple[np.ndarray]:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _emit(
        "sum", (a,), np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), backward_fn
    )


def tensor_mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    """Average over an axis, or over everything."""
    count = a.data.size if axis is None else a.shape[axis]
    return tensor_sum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def exp(a: Tensor) -> Tensor:
    """Elementwise exponential."""
    out = np.exp(a.data)
    return _emit("exp", (a,), out, lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    """Elementwise natural logarithm."""
    if np.any(a.data <= 0):
        raise NonFiniteError("log: input must be positive")
    return _emit("log", (a,), np.log(a.data), lambda g: (g / a.data,))


def clamp_min(a: Tensor, floor: float) -> Tensor:
    """Clamp values from below; clamped entries pass no gradient."""
    mask = a.data > floor
    return _emit(
        "clamp_min", (a,), np.where(mask, a.data, floor), lambda g: (g * mask,)
    )


def abs_(a: Tensor) -> Tensor:
    """Elementwise absolute value; the subgradient at 0 is 0."""
    return _emit("abs", (a,), np.abs(a.data), lambda g: (g * np.sign(a.data),))


def relu(a: Tensor) -> Tensor:
    """Rectified linear unit."""
    mask = a.data > 0
    return _emit("relu", (a,), a.data * mask, lambda g: (g * mask,))


def leaky_relu(a: Tensor, slope: float) -> Tensor:
    """Leaky rectified linear unit."""
    scale = np.where(a.data > 0, 1.0, slope)
    return _emit("leaky_relu", (a,), a.data * scale, lambda g: (g * scale,))


def sigmoid(a: Tensor) -> Tensor:
    """Logistic sigmoid."""
    out = expit(a.data)
    return _emit("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


def concat(tensors: Sequence[Any], axis: int = 1) -> Tensor:
    """Concatenate tensors along an axis."""
    parts = tuple(as_tensor(t) for t in tensors)
    try:
        data = np.concatenate([t.data for t in parts], axis=axis)
    except ValueError as err:
        raise TensorError(f"concat: {err}") from err
    bounds = np.cumsum([t.shape[axis] for t in parts])[:-1]
    return _emit(
        "concat",
        parts,
        data,
        lambda g: tuple(np.split(g, bounds, axis=axis)),
    )


def row_norm(a: Tensor) -> Tensor:
    """Euclidean norm of every row of a 2-D tensor; the subgradient at 0 is 0."""
    if a.ndim != 2:
        raise TensorError(f"row_norm: expected 2-D, got {a.shape}")
    norms = np.sqrt(np.sum(a.data * a.data, axis=1))
    safe = np.where(norms > 0, norms, 1.0)

    def backward_fn(g: np.ndarray) -> tuple[np.ndarray]:
        scale = np.where(norms > 0, g / safe, 0.0)
        return (a.data * scale[:, None],)

    return _emit("row_norm", (a,), norms, backward_fn)


def cross_entropy(logits: Tensor, labels: Sequence[int] | np.ndarray) -> Tensor:
    """Mean negative log-softmax probability of the labelled class."""
    if logits.ndim != 2:
        raise TensorError(f"cross_entropy: logits must be 2-D, got {logits.shape}")
    targets = np.asarray(labels, dtype=np.int64)
    batch, classes = logits.shape
    if targets.shape != (batch,):
        raise TensorError(
            f"cross_entropy: {targets.shape[0]} labels for a batch of {batch}"
        )
    if np.any(targets < 0) or np.any(targets >= classes):
        raise TensorError(f"cross_entropy: label outside [0, {classes})")
    rows = np.arange(batch)
    lse = logsumexp(logits.data, axis=1)
    losses = lse - logits.data[rows, targets]

    def backward_fn(g: np.ndarray) -> tuple[np.ndarray]:
        probs = np.exp(logits.data - lse[:, None])
        probs[rows, targets] -= 1.0
        return (probs * (g / batch),)

    return _emit(
        "cross_entropy", (logits,), np.asarray(max(losses.mean(), 0.0)), backward_fn
    )


def backward(tape: ComputationTape, loss: Tensor) -> None:
    """Populate gradients of every tensor reachable from ``loss``.

    Gradients accumulate into ``.grad`` across calls until zeroed.
    """
    if loss.size != 1:
        raise TensorError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss not in tape:
        raise TensorError("backward: loss was not recorded on this tape")

    grads: dict[int, np.ndarray] = {loss.uid: np.ones_like(loss.data)}
    reached: dict[int, Tensor] = {loss.uid: loss}
    for node in reversed(tape.nodes):
        upstream = grads.get(node.output.uid)
        if upstream is None:
            continue
        grads_in = node.backward(upstream)
        for tensor, tracked, grad in zip(
            node.inputs, node.tracked, grads_in, strict=True
        ):
            if grad is None or not tracked:
                continue
            grad = _unbroadcast(np.asarray(grad), tensor.shape)
            if tensor.uid in grads:
                grads[tensor.uid] = grads[tensor.uid] + grad
            else:
                grads[tensor.uid] = grad
                reached[tensor.uid] = tensor

    for uid, grad in grads.items():
        tensor = reached[uid]
        if tensor.grad is None:
            tensor.grad = np.array(grad, dtype=np.float64)
        else:
            tensor.grad = tensor.grad + grad


def zero_grad(params: Sequence[Tensor]) -> None:
    """Drop accumulated gradients of every tensor in ``params``."""
    for param in params:
        param.grad = None


def grad_check(
    fn: Callable[[Tensor], Tensor],
    point: np.ndarray,
    h: float = GRAD_CHECK_STEP,
) -> float:
    """Compare tape gradients with central differences.

    Returns the maximum relative error over all coordinates of ``point``.
    """
    if h <= 0:
        raise TensorError("grad_check: step must be positive")
    origin = np.array(point, dtype=np.float64)
    x = Tensor(origin, requires_grad=True)
    with ComputationTape() as tape:
        out = fn(x)
    backward(tape, out)
    analytic = x.grad if x.grad is not None else np.zeros_like(origin)

    numeric = np.zeros_like(origin)
    flat = numeric.reshape(-1)
    with no_grad():
        for index in range(origin.size):
            shifted = origin.copy().reshape(-1)
            shifted[index] += h
            upper = fn(Tensor(shifted.reshape(origin.shape))).item()
            shifted[index] -= 2 * h
            lower = fn(Tensor(shifted.reshape(origin.shape))).item()
            flat[index] = (upper - lower) / (2 * h)

    scale = np.maximum(
        np.maximum(np.abs(analytic), np.abs(numeric)), GRAD_CHECK_FLOOR
    )
    error = float(np.max(np.abs(analytic - numeric) / scale))
    _LOGGER.debug("Gradient check over %d coordinates: %.3e", origin.size, error)
    return error
