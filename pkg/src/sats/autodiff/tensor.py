"""Tensor node and reverse-mode traversal."""

from __future__ import annotations

import contextlib

import numpy as np

from ..errors import DoubleBackward, NumericalFault

_state = {"grad_enabled": True, "check_finite": True}


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference); intermediate arrays are not retained."""
    prev = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = prev


def grad_enabled():
    return _state["grad_enabled"]


def _check(arr, what):
    if _state["check_finite"] and not np.isfinite(arr).all():
        raise NumericalFault(f"non-finite values in {what}")


class Tensor:
    """Dense array with an optional gradient accumulator.

    Non-leaf tensors keep a reference to their parents and a closure that
    maps the output gradient to parent gradients.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op", "_spent")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        self.data = np.asarray(data, dtype=dtype)
        if self.data.dtype.kind != "f":
            self.data = self.data.astype(np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = ()
        self._backward = None
        self._op = "leaf"
        self._spent = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # operator sugar; implementations live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis, keepdims)


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def make_node(data, parents, backward, op):
    """Wrap an op result; records the graph edge only when a parent needs grads."""
    _check(data, op)
    out = Tensor(data)
    out._op = op
    if _state["grad_enabled"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _topological(root):
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(leaf) into every tracked leaf's ``grad``.

    The graph is released afterwards; a second call on the same loss raises
    DoubleBackward.
    """
    if loss._spent:
        raise DoubleBackward("backward already ran on this graph")
    if loss.data.size != 1:
        raise ValueError("backward needs a scalar loss")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tracked tensor")
    order = _topological(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            _check(g, f"gradient of {node.name or 'leaf'}")
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if pg.shape != p.data.shape:
                raise ValueError(f"{node._op}: gradient shape {pg.shape} != {p.data.shape}")
            key = id(p)
            grads[key] = pg if key not in grads else grads[key] + pg
        node._parents = ()
        node._backward = None
        node._spent = True
    loss._spent = True
