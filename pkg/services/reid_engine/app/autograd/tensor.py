"""
RTRL DESK - Tensor Core (Layer: The Engine)
Dense row-major tensors with reverse-mode differentiation.

Every differentiable operation records a Node (op name, inputs, saved context)
on its output. backward() walks the recorded Graph in reverse topological
order and applies the rule registered for each op name in BACKWARD_RULES.
"""

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from app.core.errors import ContractError, DimensionError

DTYPES = {"float32": np.float32, "float64": np.float64}

# op name -> rule(ctx, inputs, out_data, grad_out) -> tuple of input grads (None where not needed)
BackwardRule = Callable[[Dict[str, Any], Tuple["Tensor", ...], np.ndarray, np.ndarray], Tuple[Optional[np.ndarray], ...]]
BACKWARD_RULES: Dict[str, BackwardRule] = {}


def register_backward(op: str) -> Callable[[BackwardRule], BackwardRule]:
    def decorator(rule: BackwardRule) -> BackwardRule:
        BACKWARD_RULES[op] = rule
        return rule
    return decorator


class _State(threading.local):
    def __init__(self) -> None:
        self.dtype = np.float32
        self.grad_enabled = True


_state = _State()


def get_default_dtype() -> type:
    return _state.dtype


def set_default_dtype(name: str) -> None:
    if name not in DTYPES:
        raise ContractError(f"unsupported precision '{name}' (expected one of {sorted(DTYPES)})")
    _state.dtype = DTYPES[name]


@contextmanager
def precision(name: str) -> Iterator[None]:
    """Temporarily switch the default dtype, e.g. precision('float64') for gradient checks"""
    previous = _state.dtype
    set_default_dtype(name)
    try:
        yield
    finally:
        _state.dtype = previous


@contextmanager
def no_grad() -> Iterator[None]:
    previous = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


def is_grad_enabled() -> bool:
    return _state.grad_enabled


@dataclass(eq=False)
class Node:
    op: str
    inputs: Tuple["Tensor", ...]
    ctx: Dict[str, Any] = field(default_factory=dict)


class Tensor:
    """
    Dense real array participating in the differentiation graph.

    data is a contiguous numpy array; grad is allocated lazily but always
    reads as a same-shape buffer (zeros until backward writes to it) when
    requires_grad is set.
    """

    __slots__ = ("data", "requires_grad", "_grad", "_node", "name")
    __array_priority__ = 100

    def __init__(self, data: Any, requires_grad: bool = False, dtype: Optional[type] = None, name: Optional[str] = None):
        array = np.array(data, dtype=dtype if dtype is not None else _state.dtype)
        if any(dim <= 0 for dim in array.shape):
            raise DimensionError(f"tensor dimensions must be positive, got shape {array.shape}")
        self.data = array
        self.requires_grad = bool(requires_grad)
        self._grad: Optional[np.ndarray] = None
        self._node: Optional[Node] = None
        self.name = name

    @classmethod
    def _wrap(cls, array: np.ndarray, requires_grad: bool = False) -> "Tensor":
        out = cls.__new__(cls)
        array = np.asarray(array)
        out.data = array if array.flags.c_contiguous else np.ascontiguousarray(array)
        out.requires_grad = requires_grad
        out._grad = None
        out._node = None
        out.name = None
        return out

    # --- Introspection ---

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    @property
    def grad(self) -> Optional[np.ndarray]:
        if self._grad is None and self.requires_grad:
            self._grad = np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value: Optional[np.ndarray]) -> None:
        self._grad = value

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad[...] = 0

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, requires_grad=False)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{label})"

    # --- Operators (delegated to app.autograd.ops) ---

    def __add__(self, other: "Tensor") -> "Tensor":
        from app.autograd import ops
        return ops.add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        from app.autograd import ops
        return ops.sub(self, other)

    def __mul__(self, other: Union["Tensor", float]) -> "Tensor":
        from app.autograd import ops
        if isinstance(other, Tensor):
            return ops.mul(self, other)
        return ops.scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        from app.autograd import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        from app.autograd import ops
        return ops.matmul(self, other)


@dataclass
class GraphEntry:
    output: Tensor
    node: Node


class Graph:
    """Recorded operations reachable from a root, in topological order (inputs first)"""

    def __init__(self, entries: List[GraphEntry]):
        self.entries = entries

    @classmethod
    def trace(cls, root: Tensor) -> "Graph":
        entries: List[GraphEntry] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(root, False)]
        while stack:
            tensor, expanded = stack.pop()
            if expanded:
                entries.append(GraphEntry(tensor, tensor._node))
                continue
            if id(tensor) in visited or tensor._node is None:
                continue
            visited.add(id(tensor))
            stack.append((tensor, True))
            for parent in tensor._node.inputs:
                if parent.requires_grad and parent._node is not None and id(parent) not in visited:
                    stack.append((parent, False))
        return cls(entries)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[GraphEntry]:
        return iter(self.entries)


def backward(loss: Tensor) -> None:
    """
    Accumulate d(loss)/d(t) into t.grad for every requires_grad leaf t reachable
    from loss. Intermediate tensors receive this pass's gradient.
    """
    if loss.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward() called on a tensor that does not require grad")
    seed = np.ones_like(loss.data)
    if loss._node is None:
        loss.grad += seed
        return

    grads: Dict[int, np.ndarray] = {id(loss): seed}
    for entry in reversed(Graph.trace(loss).entries):
        out, node = entry.output, entry.node
        grad_out = grads.pop(id(out), None)
        if grad_out is None:
            continue
        out._grad = grad_out
        rule = BACKWARD_RULES.get(node.op)
        if rule is None:
            raise ContractError(f"no backward rule registered for op '{node.op}'")
        input_grads = rule(node.ctx, node.inputs, out.data, grad_out)
        for inp, grad in zip(node.inputs, input_grads):
            if grad is None or not inp.requires_grad:
                continue
            if grad.shape != inp.shape:
                raise ContractError(f"backward rule '{node.op}' produced grad {grad.shape} for input {inp.shape}")
            grad = grad.astype(inp.data.dtype, copy=False)
            if inp._node is None:
                inp.grad += grad
            elif id(inp) in grads:
                grads[id(inp)] = grads[id(inp)] + grad
            else:
                grads[id(inp)] = grad


def zero_grad(tensors: Sequence[Tensor]) -> None:
    for tensor in tensors:
        tensor.zero_grad()
