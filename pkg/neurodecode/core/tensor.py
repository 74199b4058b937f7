"""Numpy-backed tensor with reverse-mode gradient recording."""

from __future__ import annotations

import threading
from collections.abc import Callable, Iterator, Sequence
from contextlib import contextmanager
from typing import Any

import numpy as np

from neurodecode.config import settings
from neurodecode.utils.errors import NumericError

BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]

_state = threading.local()


def grad_enabled() -> bool:
    """Return True when new operations are recorded for backward."""
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording for the current thread."""
    previous = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


def default_dtype() -> np.dtype:
    """Return the floating dtype configured for the process."""
    return settings.numpy_dtype


class Tensor:
    """N-dimensional array carrying an optional gradient and its producer.

    The wrapped ``data`` is treated as immutable once the tensor has been used
    in a recorded operation; optimizers replace parameter values in place only
    between steps.
    """

    __array_priority__ = 100.0

    def __init__(
        self,
        data: Any,
        requires_grad: bool = False,
        *,
        name: str | None = None,
        _parents: tuple[Tensor, ...] = (),
        _backward: BackwardFn | None = None,
        _op: str = "leaf",
    ) -> None:
        if isinstance(data, np.ndarray) and data.dtype.kind == "f":
            array = data
        else:
            array = np.asarray(data, dtype=default_dtype())
        self.data: np.ndarray = array
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents = _parents
        self._backward = _backward
        self._op = _op

    # -- array protocol -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        """Return the array shape."""
        return self.data.shape

    @property
    def ndim(self) -> int:
        """Return the number of axes."""
        return self.data.ndim

    @property
    def size(self) -> int:
        """Return the number of scalars."""
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        """Return True for tensors not produced by a recorded operation."""
        return self._backward is None

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{grad})"

    def numpy(self) -> np.ndarray:
        """Return a copy of the underlying array."""
        return self.data.copy()

    def item(self) -> float:
        """Return the value of a one-element tensor as a float."""
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> Tensor:
        """Return a new leaf sharing the data but not the graph."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        """Clear the accumulated gradient."""
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> GradTape:
        """Propagate gradients from this tensor to every recorded ancestor."""
        tape = GradTape.record(self)
        tape.backward(grad)
        return tape

    # -- operators ------------------------------------------------------
    def __add__(self, other: Any) -> Tensor:
        from neurodecode.core import functional as F

        return F.add(self, other)

    def __radd__(self, other: Any) -> Tensor:
        from neurodecode.core import functional as F

        return F.add(other, self)

    def __sub__(self, other: Any) -> Tensor:
        from neurodecode.core import functional as F

        return F.sub(self, other)

    def __rsub__(self, other: Any) -> Tensor:
        from neurodecode.core import functional as F

        return F.sub(other, self)

    def __mul__(self, other: Any) -> Tensor:
        from neurodecode.core import functional as F

        return F.mul(self, other)

    def __rmul__(self, other: Any) -> Tensor:
        from neurodecode.core import functional as F

        return F.mul(other, self)

    def __truediv__(self, other: Any) -> Tensor:
        from neurodecode.core import functional as F

        return F.div(self, other)

    def __rtruediv__(self, other: Any) -> Tensor:
        from neurodecode.core import functional as F

        return F.div(other, self)

    def __neg__(self) -> Tensor:
        from neurodecode.core import functional as F

        return F.neg(self)

    def __pow__(self, exponent: float) -> Tensor:
        from neurodecode.core import functional as F

        return F.power(self, exponent)

    def __matmul__(self, other: Tensor) -> Tensor:
        from neurodecode.core import functional as F

        return F.matmul(self, other)

    def __getitem__(self, index: Any) -> Tensor:
        from neurodecode.core import functional as F

        return F.getitem(self, index)

    # -- method shortcuts ----------------------------------------------
    def sum(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
        """Sum over ``axis``."""
        from neurodecode.core import functional as F

        return F.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
        """Average over ``axis``."""
        from neurodecode.core import functional as F

        return F.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape: int) -> Tensor:
        """Return a reshaped view recorded on the tape."""
        from neurodecode.core import functional as F

        target = shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape
        return F.reshape(self, target)

    def transpose(self, *axes: int) -> Tensor:
        """Permute axes (reverse order when none are given)."""
        from neurodecode.core import functional as F

        return F.transpose(self, axes or None)


def as_tensor(value: Any) -> Tensor:
    """Wrap scalars and arrays as constant tensors; pass tensors through."""
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=default_dtype()))


def make_result(
    data: np.ndarray,
    parents: tuple[Tensor, ...],
    backward: BackwardFn,
    op: str,
) -> Tensor:
    """Wrap the output of a primitive and attach it to the graph when needed."""
    data = np.asarray(data)
    if settings.check_finite and data.dtype.kind == "f" and not np.all(np.isfinite(data)):
        raise NumericError(f"{op} produced non-finite values")
    requires = grad_enabled() and any(parent.requires_grad for parent in parents)
    if not requires:
        return Tensor(data, _op=op)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward, _op=op)


class GradTape:
    """Ordered record of the operations reachable from one output.

    ``nodes`` is a topological order (parents before children); ``leaves`` is
    the registry of trainable leaves reached. ``visited`` lists the nodes whose
    backward closure ran, in the order it ran.
    """

    def __init__(self, root: Tensor, nodes: list[Tensor]) -> None:
        self.root = root
        self.nodes = nodes
        self.leaves = [node for node in nodes if node.is_leaf and node.requires_grad]
        self.visited: list[Tensor] = []

    @classmethod
    def record(cls, root: Tensor) -> GradTape:
        """Collect the graph under ``root`` in topological order."""
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
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(root, order)

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Run every backward closure once in reverse topological order."""
        root = self.root
        if not root.requires_grad:
            raise NumericError("backward called on a tensor that does not require grad")
        seed = np.ones_like(root.data) if grad is None else np.asarray(grad, dtype=root.data.dtype)
        _accumulate(root, seed)
        for node in reversed(self.nodes):
            if node._backward is None or node.grad is None:
                continue
            self.visited.append(node)
            parent_grads = node._backward(node.grad)
            for parent, parent_grad in zip(node._parents, parent_grads, strict=True):
                if parent_grad is None or not parent.requires_grad:
                    continue
                _accumulate(parent, parent_grad)


def _accumulate(tensor: Tensor, grad: np.ndarray) -> None:
    if grad.shape != tensor.data.shape:
        grad = np.broadcast_to(grad, tensor.data.shape)
    if tensor.grad is None:
        tensor.grad = np.array(grad, dtype=tensor.data.dtype, copy=True)
    else:
        tensor.grad = tensor.grad + grad
