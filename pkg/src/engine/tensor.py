import itertools
import logging
import threading
from typing import Callable, Optional, Sequence

import numpy as np

from src.errors import GraphError, NumericError

logger = logging.getLogger(__name__)

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

# Ids increase with construction order; backward walks them in descending order.
_ids = itertools.count()
_grad_mode = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_grad_mode, "enabled", True)


class no_grad:
    """Disable graph recording for the current thread."""

    def __enter__(self):
        self._prev = is_grad_enabled()
        _grad_mode.enabled = False
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        _grad_mode.enabled = self._prev


class Tensor:
    """Dense float array with an optional gradient buffer.

    float32 unless float64 data is passed in. Tensors created by ops keep a
    reference to their parents and a closure mapping the output gradient to
    one gradient per parent.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_id")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        dtype=None,
        name: Optional[str] = None
    ):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: tuple["Tensor", ...] = ()
        self._backward: Optional[BackwardFn] = None
        self._id = next(_ids)

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: BackwardFn) -> "Tensor":
        data = np.asarray(data)
        out = cls(data, dtype=data.dtype if data.dtype in (np.float32, np.float64) else None)
        if is_grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f"name={self.name!r}, " if self.name else ""
        return f"Tensor({label}shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return ops.add(self, other)

    def __radd__(self, other):
        return ops.add(other, self)

    def __sub__(self, other):
        return ops.sub(self, other)

    def __rsub__(self, other):
        return ops.sub(other, self)

    def __mul__(self, other):
        return ops.mul(self, other)

    def __rmul__(self, other):
        return ops.mul(other, self)

    def __truediv__(self, other):
        return ops.div(self, other)

    def __rtruediv__(self, other):
        return ops.div(other, self)

    def __neg__(self):
        return ops.neg(self)

    def __pow__(self, exponent: float):
        return ops.pow(self, exponent)


def _topological_order(root: Tensor) -> list[Tensor]:
    visiting: set[int] = set()
    done: dict[int, Tensor] = {}
    stack: list[tuple[Tensor, bool]] = [(root, False)]

    while stack:
        node, expanded = stack.pop()
        if expanded:
            visiting.discard(node._id)
            done[node._id] = node
            continue
        if node._id in done:
            continue
        if node._id in visiting:
            raise GraphError(f"Cycle detected in autodiff graph at {node!r}")
        visiting.add(node._id)
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and parent._id not in done:
                if parent._id in visiting:
                    raise GraphError(f"Cycle detected in autodiff graph at {parent!r}")
                stack.append((parent, False))

    return sorted(done.values(), key=lambda t: t._id, reverse=True)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``grad`` of every reachable leaf."""
    if loss.size != 1:
        raise GraphError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not np.all(np.isfinite(loss.data)):
        raise NumericError(f"Non-finite loss {loss.item()}")
    if not loss.requires_grad:
        logger.debug("backward() on a tensor that does not require grad")
        return

    grads: dict[int, np.ndarray] = {loss._id: np.ones_like(loss.data)}

    for node in _topological_order(loss):
        g = grads.pop(node._id, None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.data.dtype)
            if pg.shape != parent.shape:
                raise GraphError(
                    f"Gradient shape {pg.shape} does not match tensor shape {parent.shape}"
                )
            if parent._id in grads:
                grads[parent._id] = grads[parent._id] + pg
            else:
                grads[parent._id] = pg


def check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"Non-finite values in {what}")


from src.engine import ops  # noqa: E402
