# Copyright (c) 2026 Mark Ferrell. MIT License.
"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation returns a new ``Tensor``. When any operand requires a gradient
the result remembers its operands and a closure mapping the output gradient
to one gradient per operand. ``backward`` walks that tape in reverse
topological order.

Broadcasting is limited to scalar-vs-tensor. The two row-wise cases the
networks and losses need (bias rows and per-row scaling) are explicit
operations, ``add_bias`` and ``row_scale``.
"""

from __future__ import annotations

import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from numpy.typing import ArrayLike, NDArray

from src.errors import DimensionError, DomainError, NumericError

logger = logging.getLogger(__name__)

FloatArray = NDArray[np.float64]
IntArray = NDArray[np.int64]

BackwardFn = Callable[[FloatArray], Sequence[FloatArray | None]]
ElementwiseKind = Literal["add", "sub", "mul", "div", "relu", "exp", "log", "neg"]
ReduceKind = Literal["sum", "mean"]


class Tensor:
    """An n-dimensional float64 array with an optional gradient.

    Attributes:
        data: Row-major float64 values; ``data.size == prod(shape)``.
        requires_grad: Whether ``backward`` accumulates into ``grad``.
        grad: Same-shape gradient buffer, or None before the first backward.
    """

    __slots__ = ("_backward", "_parents", "data", "grad", "op", "requires_grad")

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        *,
        _parents: tuple[Tensor, ...] = (),
        _backward: BackwardFn | None = None,
        _op: str = "leaf",
    ) -> None:
        # np.ascontiguousarray would promote 0-d scalars to shape (1,)
        arr = np.array(data, dtype=np.float64, order="C")
        if any(dim <= 0 for dim in arr.shape):
            raise DimensionError(f"Tensor dimensions must be positive, got shape {arr.shape}")
        self.data: FloatArray = arr
        self.requires_grad = requires_grad
        self.grad: FloatArray | None = None
        self.op = _op
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return int(self.data.ndim)

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def parents(self) -> tuple[Tensor, ...]:
        return self._parents

    @property
    def T(self) -> Tensor:  # noqa: N802
        return transpose(self)

    def item(self) -> float:
        """Return the value of a single-element tensor."""
        if self.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> FloatArray:
        """Return a copy of the data."""
        return self.data.copy()

    def detach(self) -> Tensor:
        """Return a constant tensor sharing no graph with this one."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def grad_or_zeros(self) -> FloatArray:
        """Return the accumulated gradient, or zeros if none was accumulated."""
        return self.grad.copy() if self.grad is not None else np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def __add__(self, other: Tensor | float) -> Tensor:
        return elementwise(self, other, "add")

    def __radd__(self, other: float) -> Tensor:
        return elementwise(self, other, "add")

    def __sub__(self, other: Tensor | float) -> Tensor:
        return elementwise(self, other, "sub")

    def __rsub__(self, other: float) -> Tensor:
        return elementwise(elementwise(self, None, "neg"), other, "add")

    def __mul__(self, other: Tensor | float) -> Tensor:
        return elementwise(self, other, "mul")

    def __rmul__(self, other: float) -> Tensor:
        return elementwise(self, other, "mul")

    def __truediv__(self, other: Tensor | float) -> Tensor:
        return elementwise(self, other, "div")

    def __rtruediv__(self, other: float) -> Tensor:
        return elementwise(Tensor(np.full(self.shape, float(other))), self, "div")

    def __neg__(self) -> Tensor:
        return elementwise(self, None, "neg")

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    def __pow__(self, exponent: float) -> Tensor:
        return power(self, exponent)


def as_tensor(value: Tensor | ArrayLike) -> Tensor:
    """Wrap arrays and numbers as constant tensors; pass tensors through."""
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(
    data: FloatArray,
    parents: tuple[Tensor, ...],
    backward_fn: BackwardFn,
    op: str,
) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward_fn, _op=op)
    return Tensor(data, _op=op)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of ``a [m×k]`` and ``b [k×n]``.

    Raises:
        DimensionError: If either operand is not 2-D or inner dimensions differ.

    Examples:
        >>> matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data
        array([[11.]])
    """
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    a_data, b_data = a.data, b.data

    def _backward(g: FloatArray) -> tuple[FloatArray, FloatArray]:
        return g @ b_data.T, a_data.T @ g

    return _make(a_data @ b_data, (a, b), _backward, "matmul")


def _broadcast_back(grad: FloatArray, shape: tuple[int, ...]) -> FloatArray:
    if grad.shape == shape:
        return grad
    return np.asarray(grad.sum(), dtype=np.float64).reshape(shape)


def elementwise(a: Tensor, b: Tensor | float | None, kind: ElementwiseKind) -> Tensor:
    """Apply an elementwise operation.

    Binary kinds (``add``, ``sub``, ``mul``, ``div``) need ``b``: a tensor of
    the same shape, a scalar tensor, or a Python number. Unary kinds
    (``relu``, ``exp``, ``log``, ``neg``) ignore ``b``.

    Raises:
        DimensionError: If the operand shapes are neither equal nor scalar.
        DomainError: Log of a non-positive value or division by zero.

    Examples:
        >>> elementwise(Tensor([-1.0, 0.0, 2.0]), None, "relu").data
        array([0., 0., 2.])
    """
    x = a.data
    if kind == "relu":
        mask = (x > 0).astype(np.float64)
        return _make(x * mask, (a,), lambda g: (g * mask,), "relu")
    if kind == "exp":
        out = np.exp(x)
        return _make(out, (a,), lambda g: (g * out,), "exp")
    if kind == "log":
        if np.any(x <= 0):
            raise DomainError(f"log of non-positive value (min {float(np.min(x))!r})")
        return _make(np.log(x), (a,), lambda g: (g / x,), "log")
    if kind == "neg":
        return _make(-x, (a,), lambda g: (-g,), "neg")

    if b is None:
        raise DimensionError(f"elementwise '{kind}' needs two operands")
    other = as_tensor(b)
    y = other.data
    if a.shape != other.shape and a.ndim != 0 and other.ndim != 0:
        raise DimensionError(f"elementwise '{kind}' shape mismatch: {a.shape} vs {other.shape}")
    a_shape, b_shape = a.shape, other.shape

    if kind == "add":
        out = x + y

        def _backward(g: FloatArray) -> tuple[FloatArray, FloatArray]:
            return _broadcast_back(g, a_shape), _broadcast_back(g, b_shape)

    elif kind == "sub":
        out = x - y

        def _backward(g: FloatArray) -> tuple[FloatArray, FloatArray]:
            return _broadcast_back(g, a_shape), _broadcast_back(-g, b_shape)

    elif kind == "mul":
        out = x * y

        def _backward(g: FloatArray) -> tuple[FloatArray, FloatArray]:
            return _broadcast_back(g * y, a_shape), _broadcast_back(g * x, b_shape)

    elif kind == "div":
        if np.any(y == 0):
            raise DomainError("division by zero")
        out = x / y

        def _backward(g: FloatArray) -> tuple[FloatArray, FloatArray]:
            return _broadcast_back(g / y, a_shape), _broadcast_back(-g * x / (y * y), b_shape)

    else:
        raise ValueError(f"Unknown elementwise kind '{kind}'")

    return _make(np.asarray(out, dtype=np.float64), (a, other), _backward, kind)


def relu(a: Tensor) -> Tensor:
    return elementwise(a, None, "relu")


def exp(a: Tensor) -> Tensor:
    return elementwise(a, None, "exp")


def log(a: Tensor) -> Tensor:
    return elementwise(a, None, "log")


def power(a: Tensor, exponent: float) -> Tensor:
    """Raise every element to a fixed real exponent.

    Raises:
        DomainError: Non-integer exponent of a negative value, or a negative
            exponent applied to zero.
    """
    x = a.data
    integral = float(exponent).is_integer()
    if not integral and np.any(x < 0):
        raise DomainError(f"power {exponent} of negative value")
    if exponent < 0 and np.any(x == 0):
        raise DomainError(f"power {exponent} of zero")
    out = np.power(x, exponent)

    def _backward(g: FloatArray) -> tuple[FloatArray]:
        return (g * exponent * np.power(x, exponent - 1),)

    return _make(out, (a,), _backward, "pow")


def sqrt(a: Tensor) -> Tensor:
    return power(a, 0.5)


def reduce(a: Tensor, kind: ReduceKind, axis: int | None = None) -> Tensor:
    """Sum or average over all elements or one axis.

    Raises:
        DimensionError: If ``axis`` is not a valid axis of ``a``.

    Examples:
        >>> reduce(Tensor([2.0, 4.0, 6.0]), "mean").item()
        4.0
    """
    if axis is not None and not 0 <= axis < a.ndim:
        raise DimensionError(f"invalid axis {axis} for shape {a.shape}")
    shape = a.shape
    count = a.size if axis is None else shape[axis]
    scale = 1.0 if kind == "sum" else 1.0 / count
    out = np.sum(a.data, axis=axis) * scale

    def _backward(g: FloatArray) -> tuple[FloatArray]:
        expanded = g if axis is None else np.expand_dims(g, axis)
        return (np.broadcast_to(expanded * scale, shape).astype(np.float64),)

    return _make(np.asarray(out, dtype=np.float64), (a,), _backward, kind)


def tsum(a: Tensor, axis: int | None = None) -> Tensor:
    return reduce(a, "sum", axis)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    return reduce(a, "mean", axis)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    original = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"cannot reshape {original} to {shape}") from e
    return _make(out, (a,), lambda g: (g.reshape(original),), "reshape")


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"transpose needs a matrix, got shape {a.shape}")
    return _make(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a length-``d`` bias vector to every row of ``x [n×d]``."""
    if x.ndim != 2 or bias.shape != (x.shape[1],):
        raise DimensionError(f"add_bias shape mismatch: {x.shape} + {bias.shape}")
    return _make(x.data + bias.data, (x, bias), lambda g: (g, g.sum(axis=0)), "add_bias")


def row_scale(x: Tensor, scale: Tensor) -> Tensor:
    """Multiply row ``i`` of ``x [n×d]`` by ``scale[i]``."""
    if x.ndim != 2 or scale.shape != (x.shape[0],):
        raise DimensionError(f"row_scale shape mismatch: {x.shape} * {scale.shape}")
    x_data, s_data = x.data, scale.data

    def _backward(g: FloatArray) -> tuple[FloatArray, FloatArray]:
        return g * s_data[:, None], np.sum(g * x_data, axis=1)

    return _make(x_data * s_data[:, None], (x, scale), _backward, "row_scale")


def _check_logits(z: Tensor, op: str) -> None:
    if z.ndim != 2:
        raise DimensionError(f"{op} needs [n×C] logits, got shape {z.shape}")
    if not np.all(np.isfinite(z.data)):
        raise NumericError(f"{op} received NaN or Inf logits")


def softmax_logits(z: Tensor) -> Tensor:
    """Row-wise softmax with max-subtraction.

    Raises:
        NumericError: On NaN or Inf input.

    Examples:
        >>> softmax_logits(Tensor([[1000.0, 1000.0]])).data
        array([[0.5, 0.5]])
    """
    _check_logits(z, "softmax")
    shifted = z.data - z.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)

    def _backward(g: FloatArray) -> tuple[FloatArray]:
        return (s * (g - np.sum(g * s, axis=1, keepdims=True)),)

    return _make(s, (z,), _backward, "softmax")


def log_softmax(z: Tensor) -> Tensor:
    """Row-wise log-softmax, stable for large logits."""
    _check_logits(z, "log_softmax")
    shifted = z.data - z.data.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    s = np.exp(out)

    def _backward(g: FloatArray) -> tuple[FloatArray]:
        return (g - s * np.sum(g, axis=1, keepdims=True),)

    return _make(out, (z,), _backward, "log_softmax")


@dataclass
class Graph:
    """Operations reachable from a root, in topological order.

    Every node appears after all of its operands; the root is last.
    """

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def build(cls, root: Tensor) -> Graph:
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
            for parent in reversed(node.parents):
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        return cls(nodes=order)


def backward(loss: Tensor, graph: Graph | None = None) -> None:
    """Accumulate ``∂loss/∂t`` into ``t.grad`` for every reachable leaf ``t``.

    Gradients add up across uses and across calls; call ``zero_grad`` on
    parameters between optimisation steps.

    Args:
        loss: Single-element tensor.
        graph: Pre-built graph rooted at ``loss``; built on demand if omitted.

    Raises:
        DimensionError: If ``loss`` has more than one element.
        NumericError: If any gradient becomes NaN or Inf.
    """
    if loss.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    graph = graph or Graph.build(loss)
    grads: dict[int, FloatArray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node._backward(g), strict=True):
            if pg is None or not parent.requires_grad:
                continue
            if not np.all(np.isfinite(pg)):
                raise NumericError(f"non-finite gradient flowing out of '{node.op}'")
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else np.array(pg, dtype=np.float64)
