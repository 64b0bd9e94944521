"""
Dense tensors with reverse-mode automatic differentiation.

Operations record themselves on the innermost active ``Graph`` opened with
``tape()``. Outside a tape nothing is recorded, which is the inference path:
tensors produced there carry no graph references and are safe to share
between threads.
"""

import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import special

from src.utils.errors import ShapeError

ArrayLike = Union[np.ndarray, float, int, Sequence]


class Tensor:
    """float64 array with an optional gradient buffer of the same shape."""

    # ndarray (op) Tensor defers to the Tensor reflected operators
    __array_ufunc__ = None

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name

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
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return index_select(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, axes if axes else None)


VJP = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Node:
    """One recorded operation: inputs, output and its vector-Jacobian product."""
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    vjp: VJP


class Graph:
    """Operations in execution order; every node's inputs precede it."""

    def __init__(self):
        self.nodes: List[Node] = []
        self._outputs: set = set()

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, vjp: VJP) -> None:
        self.nodes.append(Node(op, tuple(inputs), output, vjp))
        self._outputs.add(id(output))

    def produced(self, tensor: Tensor) -> bool:
        return id(tensor) in self._outputs

    def leaves(self) -> List[Tensor]:
        """Tensors requiring grad that enter the graph from outside, first-use order."""
        seen: Dict[int, Tensor] = {}
        for node in self.nodes:
            for tensor in node.inputs:
                if tensor.requires_grad and not self.produced(tensor) and id(tensor) not in seen:
                    seen[id(tensor)] = tensor
        return list(seen.values())

    def __len__(self):
        return len(self.nodes)


_state = threading.local()


def _stack() -> List[Graph]:
    if not hasattr(_state, "graphs"):
        _state.graphs = []
    return _state.graphs


def current_graph() -> Optional[Graph]:
    stack = _stack()
    return stack[-1] if stack else None


@contextmanager
def tape():
    """Record operations executed inside the block on a fresh Graph."""
    graph = Graph()
    stack = _stack()
    stack.append(graph)
    try:
        yield graph
    finally:
        stack.pop()


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(data: np.ndarray, op: str, inputs: Sequence[Tensor], vjp: VJP) -> Tensor:
    out = Tensor(data)
    graph = current_graph()
    if graph is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        graph.record(op, inputs, out, vjp)
    return out


def backward(graph: Graph, loss: Tensor, params: Optional[Iterable[Tensor]] = None) -> List[np.ndarray]:
    """
    Accumulate d(loss)/d(leaf) into the ``grad`` buffer of every leaf of ``graph``.

    Returns the gradients of ``params`` (zeros for parameters the loss does
    not reach).
    """
    if loss.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")

    pending: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: Dict[int, Tensor] = {}

    for node in reversed(graph.nodes):
        upstream = pending.pop(id(node.output), None)
        if upstream is None:
            continue
        for tensor, grad in zip(node.inputs, node.vjp(upstream)):
            if grad is None or not tensor.requires_grad:
                continue
            key = id(tensor)
            pending[key] = pending[key] + grad if key in pending else grad
            if not graph.produced(tensor):
                leaves[key] = tensor

    for key, tensor in leaves.items():
        grad = np.array(pending[key], dtype=np.float64)
        tensor.grad = grad if tensor.grad is None else tensor.grad + grad

    if params is None:
        return []
    grads = []
    for param in params:
        if param.grad is None:
            param.grad = np.zeros_like(param.data)
        grads.append(param.grad)
    return grads


def zero_grad(params: Iterable[Tensor]) -> None:
    for param in params:
        param.grad = None


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# Elementwise arithmetic

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data + b.data, "add", (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data - b.data, "sub", (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data * b.data, "mul", (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data / b.data, "div", (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, "neg", (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    return _result(a.data ** exponent, "power", (a,),
                   lambda g: (g * exponent * a.data ** (exponent - 1),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, "exp", (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.log(a.data), "log", (a,), lambda g: (g / a.data,))


def clip(a, low: float, high: float) -> Tensor:
    """Clamp into [low, high]; the gradient is zero where clamping was active."""
    a = as_tensor(a)
    inside = (a.data >= low) & (a.data <= high)
    return _result(np.clip(a.data, low, high), "clip", (a,), lambda g: (g * inside,))


# Linear algebra and shape

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def vjp(g):
        grad_a = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        grad_b = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return grad_a, grad_b

    return _result(np.matmul(a.data, b.data), "matmul", (a, b), vjp)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.sum(a.data, axis=axis, keepdims=keepdims), "sum", (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis=axis, keepdims=keepdims) / float(count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _result(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), "transpose", (a,), lambda g: (np.transpose(g, inverse),))


def swapaxes(a, axis1: int, axis2: int) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[axis1], axes[axis2] = axes[axis2], axes[axis1]
    return transpose(a, axes)


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(item, (int, slice, np.integer)) or item is Ellipsis for item in items)


def index_select(a, index) -> Tensor:
    a = as_tensor(a)
    basic = _is_basic_index(index)

    def vjp(g):
        grad = np.zeros_like(a.data)
        if basic:
            # basic indexing never repeats an element
            grad[index] = g
        else:
            np.add.at(grad, index, g)
        return (grad,)

    return _result(a.data[index], "index", (a,), vjp)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat shapes disagree: {[t.shape for t in tensors]}") from exc
    return _result(out, "concat", tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)
    return _result(out, "stack", tensors,
                   lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(tensors))))


# Nonlinearities

def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = special.expit(a.data)
    return _result(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    positive = a.data > 0
    return _result(np.where(positive, a.data, 0.0), "relu", (a,), lambda g: (g * positive,))


def softmax(a, axis: int = -1) -> Tensor:
    """Softmax along ``axis``; scipy subtracts the running max before exponentiating."""
    a = as_tensor(a)
    out = special.softmax(a.data, axis=axis)

    def vjp(g):
        inner = np.sum(g * out, axis=axis, keepdims=True)
        return (out * (g - inner),)

    return _result(out, "softmax", (a,), vjp)


def l2_normalize(a, axis: int = -1, eps: float = 1e-6) -> Tensor:
    """Divide each slice along ``axis`` by max(||slice||, eps); zero slices stay zero."""
    if eps <= 0:
        raise ShapeError("l2_normalize needs eps > 0")
    a = as_tensor(a)
    norm = np.sqrt(np.sum(a.data * a.data, axis=axis, keepdims=True))
    denom = np.maximum(norm, eps)
    out = a.data / denom

    def vjp(g):
        inner = np.sum(g * out, axis=axis, keepdims=True)
        return (np.where(norm > eps, (g - out * inner) / denom, g / denom),)

    return _result(out, "l2_normalize", (a,), vjp)
