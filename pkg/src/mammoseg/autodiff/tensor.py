"""Value-semantic tensors with reverse-mode gradient recording.

Every primitive op returns a new :class:`Tensor` that remembers its parents
and a closure mapping the output gradient to parent gradients.  A
:class:`Tape` is the topologically ordered list of those records reachable
from a scalar loss; walking it backwards fills ``.grad`` on leaf tensors.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from ..errors import ContractViolation, NonFiniteError

_CHECKED = False


@contextlib.contextmanager
def checked(enabled: bool = True) -> Iterator[None]:
    """Raise :class:`NonFiniteError` as soon as any op produces NaN/Inf."""
    global _CHECKED
    previous = _CHECKED
    _CHECKED = enabled
    try:
        yield
    finally:
        _CHECKED = previous


def is_checked() -> bool:
    return _CHECKED


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` over the axes numpy broadcasting added to reach ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        if arr.ndim > 4:
            raise ContractViolation(f"tensors have rank 0-4, got shape {arr.shape}")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.op = "leaf"

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"],
                 backward: Callable, op: str) -> "Tensor":
        if _CHECKED and not np.all(np.isfinite(data)):
            raise NonFiniteError(f"non-finite values produced by {op}")
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        out._parents = tuple(parents) if out.requires_grad else ()
        out._backward = backward if out.requires_grad else None
        out.op = op
        return out

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    def __len__(self) -> int:
        return len(self.data)

    def backward(self) -> "Tape":
        tape = Tape.record(self)
        tape.backward()
        return tape

    # -- arithmetic ----------------------------------------------------
    def _lift(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    def __add__(self, other):
        other = self._lift(other)
        a, b = self, other

        def back(g):
            return unbroadcast(g, a.shape), unbroadcast(g, b.shape)
        return Tensor._from_op(a.data + b.data, (a, b), back, "add")

    __radd__ = __add__

    def __sub__(self, other):
        other = self._lift(other)
        a, b = self, other

        def back(g):
            return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)
        return Tensor._from_op(a.data - b.data, (a, b), back, "sub")

    def __rsub__(self, other):
        return self._lift(other) - self

    def __mul__(self, other):
        other = self._lift(other)
        a, b = self, other

        def back(g):
            return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)
        return Tensor._from_op(a.data * b.data, (a, b), back, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._lift(other)
        a, b = self, other

        def back(g):
            ga = g / b.data
            return unbroadcast(ga, a.shape), unbroadcast(-ga * a.data / b.data, b.shape)
        return Tensor._from_op(a.data / b.data, (a, b), back, "div")

    def __rtruediv__(self, other):
        return self._lift(other) / self

    def __neg__(self):
        return Tensor._from_op(-self.data, (self,), lambda g: (-g,), "neg")

    def __pow__(self, exponent: float):
        a = self
        e = float(exponent)

        def back(g):
            return (g * e * a.data ** (e - 1),)
        return Tensor._from_op(a.data ** e, (a,), back, "pow")

    def log(self) -> "Tensor":
        a = self
        return Tensor._from_op(np.log(a.data), (a,), lambda g: (g / a.data,), "log")

    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return Tensor._from_op(out, (self,), lambda g: (g * out,), "exp")

    def abs(self) -> "Tensor":
        a = self
        return Tensor._from_op(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        a = self
        out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape).copy(),)
        return Tensor._from_op(out, (a,), back, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.data.size if axis is None else np.prod([self.shape[i] for i in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        return Tensor._from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


class Parameter(Tensor):
    """A named, trainable leaf whose ``grad`` persists across backward passes."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = "", dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype})"


class Tape:
    """Recorded primitive operations in topological order (inputs first)."""

    def __init__(self, nodes: list, root: Tensor):
        self.nodes = nodes
        self.root = root

    @classmethod
    def record(cls, root: Tensor) -> "Tape":
        order, seen = [], set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in reversed(node._parents):
                if id(parent) not in seen and parent.requires_grad:
                    stack.append((parent, False))
        return cls(order, root)

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)

    def backward(self, release: bool = True) -> None:
        """Propagate d(root)/d(node) to every leaf; leaf grads accumulate."""
        root = self.root
        if root.data.size != 1 or root.data.ndim > 1:
            raise ContractViolation(f"backward needs a scalar loss, got shape {root.shape}")
        if not root.requires_grad:
            return
        grads = {id(root): np.ones_like(root.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if node._backward is None:
                # leaf: fold the pass total into the persistent buffer once
                if g is not None:
                    if node.grad is None:
                        node.grad = np.zeros_like(node.data)
                    node.grad = node.grad + g.astype(node.data.dtype, copy=False)
                continue
            if g is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            if release:
                node._backward = None
                node._parents = ()


def backward(loss: Tensor) -> Tape:
    """Record the tape behind ``loss`` and run it backwards."""
    return loss.backward()
