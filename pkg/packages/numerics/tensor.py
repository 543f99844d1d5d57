"""Dense tensors with a reverse-mode gradient tape.

Every primitive in ``functional.py`` produces its result through ``record``,
which stores the parents and a backward rule on the output tensor. The tape
is implicit: each tensor gets a monotonically increasing sequence number at
creation, so sorting reachable nodes by that number is a topological order.
"""

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from packages.helpers.errors import DimensionError, GraphError

SUPPORTED_DTYPES = (np.float32, np.float64)
DEFAULT_DTYPE = np.float32

_sequence = itertools.count()
_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording for the current thread."""
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


def _resolve_dtype(dtype) -> np.dtype:
    resolved = np.dtype(dtype if dtype is not None else DEFAULT_DTYPE)
    if resolved.type not in SUPPORTED_DTYPES:
        raise DimensionError(f"unsupported dtype {resolved}; expected float32 or float64")
    return resolved


class Tensor:
    """Row-major numeric array that can take part in a gradient graph."""

    __slots__ = ("data", "requires_grad", "grad", "name", "op", "_parents",
                 "_backward", "_seq", "_freed")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None and isinstance(data, np.ndarray) and data.dtype.type in SUPPORTED_DTYPES:
            dtype = data.dtype
        self.data = np.ascontiguousarray(np.asarray(data, dtype=_resolve_dtype(dtype)))
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.op = "leaf"
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable] = None
        self._seq = next(_sequence)
        self._freed = False

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), dtype=self.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __add__(self, other):
        from packages.numerics import functional as F
        return F.add(self, other)

    def __sub__(self, other):
        from packages.numerics import functional as F
        return F.sub(self, other)

    def __mul__(self, other):
        from packages.numerics import functional as F
        if isinstance(other, (int, float)):
            return F.scale(self, other)
        return F.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from packages.numerics import functional as F
        return F.scale(self, -1.0)

    def __matmul__(self, other):
        from packages.numerics import functional as F
        return F.matmul(self, other)

    def __repr__(self):
        grad_flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, op={self.op}{grad_flag})"


def as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype)


def record(op: str, data: np.ndarray, parents: Sequence[Tensor],
           backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> Tensor:
    """
    Wrap a primitive's output and, when gradients are needed, attach it to the tape.

    Args:
        op: Name of the primitive, kept for inspection
        data: Forward result
        parents: Input tensors in the order ``backward_fn`` returns their gradients
        backward_fn: Maps the output gradient to one gradient (or None) per parent

    Returns:
        Tensor: The output tensor
    """
    out = Tensor(data, dtype=data.dtype)
    out.op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def graph_nodes(loss: Tensor) -> List[Tensor]:
    """Return every tensor reachable from ``loss`` in topological order."""
    seen = set()
    nodes = []
    stack = [loss]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        nodes.append(node)
        stack.extend(node._parents)
    nodes.sort(key=lambda n: n._seq)
    return nodes


def backward(loss: Tensor) -> None:
    """
    Accumulate d(loss)/d(leaf) into ``grad`` of every reachable leaf.

    The tape is freed afterwards; calling backward again on the same loss is
    an error.
    """
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._freed:
        raise GraphError("backward was already called on this graph; run a new forward pass")

    nodes = graph_nodes(loss)
    pending = {id(loss): np.ones_like(loss.data)}
    for node in reversed(nodes):
        grad = pending.pop(id(node), None)
        if grad is None:
            continue
        if node.is_leaf:
            if node.requires_grad:
                node.grad = grad.copy() if node.grad is None else node.grad + grad
            continue
        parent_grads = node._backward(grad)
        for parent, parent_grad in zip(node._parents, parent_grads):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + parent_grad
            else:
                pending[key] = parent_grad

    for node in nodes:
        if not node.is_leaf:
            node._parents = ()
            node._backward = None
            node._freed = True
    loss._freed = True
