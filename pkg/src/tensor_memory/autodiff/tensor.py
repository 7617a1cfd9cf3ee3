"""Dense tensors with a recorded graph and a reverse-mode backward pass.

A :class:`Tensor` wraps a contiguous ``numpy`` array.  Every primitive in
:mod:`tensor_memory.autodiff.ops` that touches a tensor requiring gradients
records a :class:`Node` holding its inputs and an adjoint rule.  Calling
:meth:`Tensor.backward` on a scalar orders the reachable nodes into a
:class:`Graph` and runs the adjoints once each, in reverse.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np

from ..errors import DimensionError, NumericError

DEFAULT_DTYPE = np.float64

_state = threading.local()


def _flag(name: str, default: bool) -> bool:
    return getattr(_state, name, default)


def is_grad_enabled() -> bool:
    return _flag("grad_enabled", True)


def finite_checks_enabled() -> bool:
    return _flag("check_finite", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording on the current thread."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextmanager
def finite_checks(enabled: bool) -> Iterator[None]:
    """Toggle the per-op NaN/Inf check on the current thread."""
    prev = finite_checks_enabled()
    _state.check_finite = enabled
    try:
        yield
    finally:
        _state.check_finite = prev


class Node:
    """One recorded primitive application."""

    __slots__ = ("op", "inputs", "adjoint")

    def __init__(self, op: str, inputs: tuple["Tensor", ...], adjoint: Callable):
        self.op = op
        self.inputs = inputs
        # adjoint(grad_out) -> tuple aligned with inputs; None entries skip
        self.adjoint = adjoint

    def __repr__(self) -> str:
        return f"Node({self.op}, n_inputs={len(self.inputs)})"


class Tensor:
    """N-dimensional real array with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "node", "name", "__weakref__")

    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 dtype=None):
        arr = np.asarray(data, dtype=dtype or _infer_dtype(data))
        self.data = np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.node: Node | None = None
        self.name = name

    # -- introspection -----------------------------------------------------
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
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- backward ------------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> "Graph":
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(
                    f"backward() without a seed gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)
        if grad.shape != self.shape:
            raise DimensionError(f"seed gradient shape {grad.shape} != tensor shape {self.shape}")
        graph = Graph.from_output(self)
        graph.run_backward(self, grad)
        return graph

    # -- operator sugar (implemented in ops) ---------------------------------
    def __add__(self, other):
        return _ops().add(self, other)

    def __radd__(self, other):
        return _ops().add(other, self)

    def __sub__(self, other):
        return _ops().sub(self, other)

    def __rsub__(self, other):
        return _ops().sub(other, self)

    def __mul__(self, other):
        return _ops().mul(self, other)

    def __rmul__(self, other):
        return _ops().mul(other, self)

    def __truediv__(self, other):
        return _ops().div(self, other)

    def __rtruediv__(self, other):
        return _ops().div(other, self)

    def __neg__(self):
        return _ops().neg(self)

    def __matmul__(self, other):
        return _ops().matmul(self, other)

    def __rmatmul__(self, other):
        return _ops().matmul(other, self)

    def __getitem__(self, index):
        return _ops().getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _ops().reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return _ops().transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return _ops().sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return _ops().mean(self, axis=axis, keepdims=keepdims)

    @property
    def T(self):
        return _ops().transpose(self, None)


def _not_scalar(t: Tensor):
    raise DimensionError(f"item() needs a single-element tensor, got shape {t.shape}")


def _infer_dtype(data):
    if isinstance(data, np.ndarray) and np.issubdtype(data.dtype, np.floating):
        return data.dtype
    return DEFAULT_DTYPE


def _ops():
    from . import ops
    return ops


class Graph:
    """Topologically ordered list of the nodes reachable from one output."""

    def __init__(self, entries: list[tuple[Node, Tensor]]):
        self.entries = entries

    @property
    def nodes(self) -> list[Node]:
        return [node for node, _ in self.entries]

    def __len__(self) -> int:
        return len(self.entries)

    @classmethod
    def from_output(cls, output: Tensor) -> "Graph":
        order: list[tuple[Node, Tensor]] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            t, expanded = stack.pop()
            if t.node is None:
                continue
            if expanded:
                order.append((t.node, t))
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for parent in t.node.inputs:
                if parent.node is not None and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def run_backward(self, output: Tensor, seed: np.ndarray) -> None:
        grads: dict[int, np.ndarray] = {id(output): seed}
        owned: set[int] = set()
        leaves: dict[int, Tensor] = {}

        def accumulate(inp: Tensor, gi) -> None:
            key = id(inp)
            prev = grads.get(key)
            if isinstance(gi, Scatter):
                if prev is None:
                    prev = np.zeros(inp.shape, dtype=inp.dtype)
                elif key not in owned:
                    prev = prev.copy()
                grads[key] = prev
                owned.add(key)
                gi.add_into(prev)
                return
            if gi.shape != inp.shape:
                raise DimensionError(f"adjoint returned shape {gi.shape} for input {inp.shape}")
            if prev is None:
                grads[key] = gi
            elif key in owned:
                prev += gi
            else:
                grads[key] = prev + gi
                owned.add(key)

        for node, out in reversed(self.entries):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.adjoint(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.node is None:
                    leaves[id(inp)] = inp
                accumulate(inp, gi)
        if output.node is None and output.requires_grad:
            leaves[id(output)] = output
        for key, leaf in leaves.items():
            g = grads[key]
            leaf.grad = np.array(g) if leaf.grad is None else leaf.grad + g


class Scatter:
    """Sparse adjoint: ``value`` lands at ``index`` of an otherwise-zero gradient."""

    __slots__ = ("index", "value", "basic")

    def __init__(self, index, value: np.ndarray, basic: bool):
        self.index = index
        self.value = value
        self.basic = basic

    def add_into(self, buf: np.ndarray) -> None:
        if self.basic:
            buf[self.index] += self.value
        else:
            np.add.at(buf, self.index, self.value)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def record(op: str, out: np.ndarray, inputs: Sequence[Tensor], adjoint: Callable) -> Tensor:
    """Wrap a primitive's forward value, recording a node when needed."""
    if finite_checks_enabled() and not np.all(np.isfinite(out)):
        raise NumericError(f"non-finite value produced by {op}")
    t = Tensor.__new__(Tensor)
    t.data = out
    t.grad = None
    t.name = None
    t.node = None
    t.requires_grad = False
    if is_grad_enabled() and any(i.requires_grad for i in inputs):
        t.requires_grad = True
        t.node = Node(op, tuple(inputs), adjoint)
    return t
