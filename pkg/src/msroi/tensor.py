"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable operation produces a new immutable ``Tensor`` whose
``node`` records the inputs and a closure mapping the output gradient to
input gradients.  ``backward`` walks that graph once in reverse topological
order and then releases it; a second call on the same graph is an error.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class GraphError(RuntimeError):
    pass


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Run operations without recording a graph (inference, evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None
    consumed: bool = False


class Tensor:
    __slots__ = ("data", "requires_grad", "node", "trainable", "__weakref__")

    def __init__(self, data, *, trainable: bool = False, requires_grad: bool | None = None, node: Node | None = None):
        arr = np.array(data, dtype=np.float64, copy=True, order="C")
        arr.flags.writeable = False
        self.data = arr
        self.trainable = trainable
        self.requires_grad = trainable if requires_grad is None else requires_grad
        self.node = node

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        tag = ", trainable" if self.trainable else ""
        op = f", op={self.node.op}" if self.node else ""
        return f"Tensor(shape={list(self.shape)}{tag}{op})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, scale(other, -1.0))

    def __getitem__(self, index):
        return take(self, index)


def tensor_new(shape: Sequence[int], data: Iterable[float], trainable: bool = False) -> Tensor:
    """Build a tensor from a flat row-major value list.

    >>> tensor_new([2, 2], [1, 2, 3, 4]).data.tolist()
    [[1.0, 2.0], [3.0, 4.0]]
    """
    shape = tuple(int(s) for s in shape)
    if any(s <= 0 for s in shape):
        raise ShapeError(f"dimensions must be positive, got {list(shape)}")
    flat = np.asarray(list(data), dtype=np.float64)
    expected = math.prod(shape)
    if flat.size != expected:
        raise ShapeError(f"data length {flat.size} does not match shape {list(shape)} ({expected} elements)")
    if not np.isfinite(flat).all():
        raise NonFiniteError("tensor data contains NaN or Inf")
    return Tensor(flat.reshape(shape), trainable=trainable)


def parameter(data) -> Tensor:
    return Tensor(data, trainable=True)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape))


def ones(shape) -> Tensor:
    return Tensor(np.ones(shape))


def make_op(op: str, out: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap a forward result, recording ``backward_fn`` when any input needs gradients.

    ``backward_fn(grad_out)`` returns one gradient array (or None) per input.
    """
    if not np.isfinite(out).all():
        raise NonFiniteError(f"non-finite value produced by {op}")
    needs = _grad_enabled and any(t.requires_grad for t in inputs)
    result = Tensor.__new__(Tensor)
    out = np.asarray(out, dtype=np.float64)
    if not out.flags.c_contiguous or not out.flags.writeable:
        out = out.copy(order="C")
    out.flags.writeable = False
    result.data = out
    result.trainable = False
    result.requires_grad = needs
    result.node = Node(op, tuple(inputs), backward_fn) if needs else None
    return result


def topological_order(root: Tensor) -> list[Tensor]:
    """Tensors reachable from ``root`` through recorded nodes, inputs before users."""
    order: list[Tensor] = []
    state: dict[int, int] = {}  # 1 = on stack, 2 = done
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        key = id(t)
        if expanded:
            state[key] = 2
            order.append(t)
            continue
        s = state.get(key)
        if s == 2:
            continue
        if s == 1:
            raise GraphError(f"cycle detected at {t!r}")
        state[key] = 1
        stack.append((t, True))
        if t.node is not None:
            for inp in t.node.inputs:
                if not inp.requires_grad:
                    continue
                si = state.get(id(inp))
                if si == 1:
                    raise GraphError(f"cycle detected at {inp!r}")
                if si is None:
                    stack.append((inp, False))
    return order


def backward(loss: Tensor, wrt: Sequence[Tensor] | None = None) -> dict[Tensor, Tensor]:
    """Gradients of a scalar ``loss``.

    ``wrt`` defaults to every trainable leaf reachable from ``loss``.  Any
    requested tensor the loss does not depend on gets a zero gradient.  The
    graph is released afterwards; calling again on it raises ``GraphError``.
    """
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {list(loss.shape)}")
    order = topological_order(loss) if loss.requires_grad else [loss]
    for t in order:
        if t.node is not None and t.node.consumed:
            raise GraphError("graph already consumed by a previous backward pass")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(order):
        node = t.node
        g = grads.get(id(t))
        if node is None or g is None:
            continue
        in_grads = node.backward_fn(g)
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            if gi.shape != inp.shape:
                raise GraphError(f"{node.op} returned gradient {gi.shape} for input {inp.shape}")
            k = id(inp)
            if k in grads:
                grads[k] = grads[k] + gi
            else:
                grads[k] = gi

    if wrt is None:
        wrt = [t for t in order if t.trainable and t.node is None]
    out = {}
    for t in wrt:
        g = grads.get(id(t))
        out[t] = Tensor(np.zeros(t.shape) if g is None else g)

    for t in order:
        if t.node is not None:
            t.node.consumed = True
            t.node.backward_fn = None
    return out


def grad_check(fn: Callable[[Tensor], Tensor], point: Tensor, epsilon: float = 1e-3) -> float:
    """Max relative error between ``backward`` and central differences.

    Error per component is ``|analytic - numeric| / max(1, |numeric|)``.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    x = Tensor(point.data, trainable=True)
    out = fn(x)
    if out.data.size != 1:
        raise ShapeError(f"grad_check needs a scalar function, got shape {list(out.shape)}")
    analytic = backward(out, [x])[x].data.reshape(-1)

    base = point.data.reshape(-1)
    numeric = np.empty_like(base)
    with no_grad():
        for i in range(base.size):
            plus = base.copy()
            plus[i] += epsilon
            minus = base.copy()
            minus[i] -= epsilon
            fp = fn(Tensor(plus.reshape(point.shape))).item()
            fm = fn(Tensor(minus.reshape(point.shape))).item()
            numeric[i] = (fp - fm) / (2.0 * epsilon)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(err.max()) if err.size else 0.0


# -- elementary differentiable operations ------------------------------------


def _same_shape(op, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {list(a.shape)} and {list(b.shape)} differ (no implicit broadcasting)")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return make_op("add", a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return make_op("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    return make_op("scale", a.data * c, (a,), lambda g: (g * c,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return make_op("square", ad * ad, (a,), lambda g: (2.0 * ad * g,))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return make_op("sum", np.asarray(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),))


def take(a: Tensor, index) -> Tensor:
    """Basic or integer-array indexing; gradient scatters back with accumulation."""
    shape = a.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return make_op("take", np.asarray(a.data[index]), (a,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return make_op("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


@dataclass
class Graph:
    """Read-only view of a recorded graph in topological order."""

    nodes: list[Tensor] = field(default_factory=list)
    parameters: list[Tensor] = field(default_factory=list)

    @classmethod
    def trace(cls, root: Tensor) -> "Graph":
        order = topological_order(root)
        return cls(order, [t for t in order if t.trainable])
