"""
Tensor - Dense float64 arrays with reverse-mode automatic differentiation.
Graphs are built per step (define-by-run) and walked backwards by `backward`.
"""

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence, Union

import numpy as np

from src.errors import NumericError, PreconditionError, ShapeError

ArrayLike = Union["Tensor", np.ndarray, float, int]
BackwardFn = Callable[[np.ndarray], tuple[Optional[np.ndarray], ...]]

LAYER_NORM_EPS = 1e-5
_GELU_C = float(np.sqrt(2.0 / np.pi))

_grad_state = threading.local()


def grad_enabled() -> bool:
    """Whether ops on the current thread record graph edges."""
    return getattr(_grad_state, "enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording on the current thread (read-only evaluation)."""
    previous = grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


class Tensor:
    """
    A node in the computation graph.

    Leaf tensors created with requires_grad=True are parameters: `backward`
    accumulates into their `grad`. Intermediate nodes get their `grad`
    overwritten on every backward pass.
    """

    # ndarray (op) Tensor defers to the Tensor reflected operator
    __array_ufunc__ = None

    def __init__(
        self,
        values: Union[np.ndarray, float, int, Sequence],
        requires_grad: bool = False,
        parents: tuple["Tensor", ...] = (),
        backward_fn: Optional[BackwardFn] = None,
        op: str = "leaf",
    ):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents = parents
        self._backward_fn = backward_fn
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return int(self.values.size)

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        return float(self.values.reshape(-1)[0]) if self.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.values)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # Arithmetic

    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        return div(self, other)

    def __neg__(self) -> "Tensor":
        return mul(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def sum(self, axis: Optional[Union[int, tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Optional[Union[int, tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape: int) -> "Tensor":
        return reshape(self, shape)

    def transpose(self, *axes: int) -> "Tensor":
        return transpose(self, axes)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def backward(self) -> None:
        backward(self)


def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(values: np.ndarray, parents: tuple[Tensor, ...], backward_fn: BackwardFn, op: str) -> Tensor:
    if grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(values, requires_grad=True, parents=parents, backward_fn=backward_fn, op=op)
    return Tensor(values, op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from e


# Elementwise ops


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def backward_fn(g: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.values + b.values, (a, b), backward_fn, "add")


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def backward_fn(g: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.values - b.values, (a, b), backward_fn, "sub")


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def backward_fn(g: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        return _unbroadcast(g * b.values, a.shape), _unbroadcast(g * a.values, b.shape)

    return _make(a.values * b.values, (a, b), backward_fn, "mul")


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    out = a.values / b.values

    def backward_fn(g: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        return _unbroadcast(g / b.values, a.shape), _unbroadcast(-g * out / b.values, b.shape)

    return _make(out, (a, b), backward_fn, "div")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.values)

    def backward_fn(g: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        return (g * out,)

    return _make(out, (x,), backward_fn, "exp")


def log(x: Tensor) -> Tensor:
    if np.any(x.values <= 0):
        raise NumericError("log of non-positive value")

    def backward_fn(g: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        return (g / x.values,)

    return _make(np.log(x.values), (x,), backward_fn, "log")


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    v = x.values
    inner = _GELU_C * (v + 0.044715 * v**3)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def backward_fn(g: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        d_inner = _GELU_C * (1.0 + 3.0 * 0.044715 * v**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * d_inner),)

    return _make(out, (x,), backward_fn, "gelu")


# Reductions and shape ops


def reduce_sum(x: Tensor, axis: Optional[Union[int, tuple[int, ...]]] = None, keepdims: bool = False) -> Tensor:
    out = x.values.sum(axis=axis, keepdims=keepdims)

    def backward_fn(g: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), backward_fn, "sum")


def reduce_mean(x: Tensor, axis: Optional[Union[int, tuple[int, ...]]] = None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return reduce_sum(x, axis=axis, keepdims=keepdims) / float(count)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.values.reshape(tuple(shape))
    except ValueError as e:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {tuple(shape)}") from e

    def backward_fn(g: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        return (g.reshape(x.shape),)

    return _make(out, (x,), backward_fn, "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward_fn(g: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        return (g.transpose(inverse),)

    return _make(x.values.transpose(axes), (x,), backward_fn, "transpose")


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup `table[ids]`; gradients scatter-add back into the table."""
    ids = np.asarray(ids, dtype=np.int64)

    def backward_fn(g: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        grad = np.zeros_like(table.values)
        np.add.at(grad, ids, g)
        return (grad,)

    return _make(table.values[ids], (table,), backward_fn, "embedding")


# Linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Matrix product over the last two axes; leading axes broadcast.

    Backward accumulates dA = dC·Bᵀ and dB = Aᵀ·dC.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.values, b.values)
    except ValueError as e:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from e

    def backward_fn(g: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        grad_a = np.matmul(g, np.swapaxes(b.values, -1, -2))
        grad_b = np.matmul(np.swapaxes(a.values, -1, -2), g)
        return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)

    return _make(out, (a, b), backward_fn, "matmul")


# Normalisation


def _require_finite(x: Tensor, op: str) -> None:
    if not np.all(np.isfinite(x.values)):
        raise NumericError(f"{op}: non-finite input")


def _softmax_backward(out: np.ndarray, axis: int) -> BackwardFn:
    def backward_fn(g: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return backward_fn


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < max(x.ndim, 1):
        raise ShapeError(f"softmax: axis {axis} invalid for shape {x.shape}")
    _require_finite(x, "softmax")
    shifted = x.values - x.values.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    return _make(out, (x,), _softmax_backward(out, axis), "softmax")


def masked_softmax(x: Tensor, mask: np.ndarray, axis: int = -1) -> Tensor:
    """Softmax where positions with mask=False get exactly zero probability."""
    _require_finite(x, "masked_softmax")
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    if not np.all(mask.any(axis=axis)):
        raise PreconditionError("masked_softmax: a row has no admissible position")
    scores = np.where(mask, x.values, -np.inf)
    e = np.exp(scores - scores.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)
    return _make(out, (x,), _softmax_backward(out, axis), "masked_softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    _require_finite(x, "log_softmax")
    shifted = x.values - x.values.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    probs = np.exp(out)

    def backward_fn(g: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), backward_fn, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match last dim {d}")
    mu = x.values.mean(axis=-1, keepdims=True)
    centered = x.values - mu
    inv_std = 1.0 / np.sqrt((centered**2).mean(axis=-1, keepdims=True) + eps)
    normed = centered * inv_std
    out = normed * gain.values + bias.values

    def backward_fn(g: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        g_normed = g * gain.values
        grad_x = inv_std * (
            g_normed
            - g_normed.mean(axis=-1, keepdims=True)
            - normed * (g_normed * normed).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(x.ndim - 1))
        return grad_x, (g * normed).sum(axis=lead), g.sum(axis=lead)

    return _make(out, (x, gain, bias), backward_fn, "layer_norm")


# Losses


def cross_entropy(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """
    Mean negative log-likelihood of `targets` over positions where `mask` is set.

    Args:
        logits: [..., T, V] unnormalised scores
        targets: [..., T] integer ids in [0, V)
        mask: [..., T] booleans selecting scored positions

    Returns:
        Scalar tensor
    """
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    vocab = logits.shape[-1]
    if targets.shape != logits.shape[:-1] or mask.shape != targets.shape:
        raise ShapeError(
            f"cross_entropy: logits {logits.shape}, targets {targets.shape}, mask {mask.shape}"
        )
    count = int(mask.sum())
    if count == 0:
        raise PreconditionError("cross_entropy: mask selects no positions")
    if np.any(targets[mask] < 0) or np.any(targets[mask] >= vocab):
        raise PreconditionError(f"cross_entropy: target ids outside [0, {vocab})")
    _require_finite(logits, "cross_entropy")

    safe_targets = np.where(mask, targets, 0)
    shifted = logits.values - logits.values.max(axis=-1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    picked = np.take_along_axis(log_probs, safe_targets[..., None], axis=-1)[..., 0]
    loss = -(picked * mask).sum() / count

    def backward_fn(g: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        grad = np.exp(log_probs)
        np.put_along_axis(
            grad,
            safe_targets[..., None],
            np.take_along_axis(grad, safe_targets[..., None], axis=-1) - 1.0,
            axis=-1,
        )
        return (grad * mask[..., None] * (g / count),)

    return _make(np.asarray(loss), (logits,), backward_fn, "cross_entropy")


# Backward pass


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """
    Populate gradients of every node reachable from a scalar `loss`.

    Leaf gradients accumulate across calls until cleared.
    """
    if loss.size != 1:
        raise PreconditionError(f"backward: root must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise PreconditionError("backward: root does not require gradients")

    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    for node in reversed(_topological_order(loss)):
        grad = pending.pop(id(node), None)
        if grad is None:
            continue
        if node.is_leaf:
            node.grad = grad.copy() if node.grad is None else node.grad + grad
            continue
        node.grad = grad
        assert node._backward_fn is not None
        for parent, parent_grad in zip(node._parents, node._backward_fn(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = parent_grad if key not in pending else pending[key] + parent_grad


# Optimiser


@dataclass
class OptimizerState:
    """Adam moments, step counter and hyperparameters."""

    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    first_moment: list[np.ndarray] = field(default_factory=list)
    second_moment: list[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[Tensor], state: OptimizerState) -> None:
    """Bias-corrected Adam update in place; clears gradients afterwards."""
    missing = [i for i, p in enumerate(params) if p.grad is None]
    if missing:
        raise PreconditionError(f"adam_step: parameters {missing} have no gradient")
    if not state.first_moment:
        state.first_moment = [np.zeros_like(p.values) for p in params]
        state.second_moment = [np.zeros_like(p.values) for p in params]
    if len(state.first_moment) != len(params):
        raise PreconditionError("adam_step: optimizer state does not match parameter list")

    state.step += 1
    correction1 = 1.0 - state.beta1**state.step
    correction2 = 1.0 - state.beta2**state.step
    for p, m, v in zip(params, state.first_moment, state.second_moment):
        g = p.grad
        assert g is not None
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.values -= state.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + state.epsilon)
        p.grad = None
