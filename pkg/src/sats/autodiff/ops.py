"""Differentiable operators.

Each function computes its forward value with numpy and registers a closure
mapping the output gradient to one gradient per parent (``None`` for parents
that need none).
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from ..errors import ShapeMismatch
from .tensor import Tensor, as_tensor, make_node


def _unbroadcast(grad, shape):
    # sum a broadcast gradient back down to the operand's shape
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def add(a, b):
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_node(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_node(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    a, b = _pair(a, b)

    def bw(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return make_node(a.data * b.data, (a, b), bw, "mul")


def div(a, b):
    a, b = _pair(a, b)
    out = a.data / b.data

    def bw(g):
        return (
            _unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None,
        )

    return make_node(out, (a, b), bw, "div")


def neg(x):
    return make_node(-x.data, (x,), lambda g: (-g,), "neg")


def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy naming
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_node(np.asarray(out), (x,), bw, "sum")


def mean(x, axis=None, keepdims=False):
    out = x.data.mean(axis=axis, keepdims=keepdims)
    n = x.data.size // max(np.asarray(out).size, 1)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.shape).astype(x.dtype),)

    return make_node(np.asarray(out), (x,), bw, "mean")


def square(x):
    return make_node(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


def sqrt(x):
    out = np.sqrt(x.data)
    return make_node(out, (x,), lambda g: (g / (2.0 * out),), "sqrt")


def log(x):
    return make_node(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sigmoid(x):
    out = expit(x.data)
    return make_node(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(x):
    """log(1 + exp(x)) without overflow."""
    out = np.logaddexp(0.0, x.data).astype(x.dtype)
    return make_node(out, (x,), lambda g: (g * expit(x.data),), "softplus")


def maximum(x, c):
    """Elementwise max(x, c) for a constant c; gradient 1 where x > c."""
    out = np.maximum(x.data, np.asarray(c, dtype=x.dtype))
    return make_node(out, (x,), lambda g: (g * (x.data > c),), "maximum")


def relu(x):
    return make_node(np.maximum(x.data, 0), (x,), lambda g: (g * (x.data > 0),), "relu")


def leaky_relu(x, slope=0.01):
    pos = x.data > 0
    out = np.where(pos, x.data, x.data * x.dtype.type(slope))

    def bw(g):
        return (np.where(pos, g, g * x.dtype.type(slope)),)

    return make_node(out, (x,), bw, "leaky_relu")


def concat(tensors, axis=1):
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(g):
        return tuple(
            np.take(g, range(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return make_node(out, tuple(tensors), bw, "concat")


def flip(x, axis=-1):
    """Reverse one axis (W by default), the Siamese mirror."""
    out = np.flip(x.data, axis=axis).copy()
    return make_node(out, (x,), lambda g: (np.flip(g, axis=axis).copy(),), "flip")


def instance_norm(x, gain, shift, eps=1e-5):
    """Standardize each (sample, channel) over its spatial axes, then scale and shift."""
    if x.ndim < 3 or gain.shape != (x.shape[1],) or shift.shape != (x.shape[1],):
        raise ShapeMismatch(f"instance_norm: x {x.shape}, gain {gain.shape}, shift {shift.shape}")
    axes = tuple(range(2, x.ndim))
    m = int(np.prod([x.shape[a] for a in axes]))
    if m < 2:
        raise ShapeMismatch("instance_norm needs at least 2 spatial elements")
    bshape = (1, -1) + (1,) * len(axes)
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv_std
    out = xhat * gain.data.reshape(bshape) + shift.data.reshape(bshape)

    def bw(g):
        g_shift = g.sum(axis=(0,) + axes)
        g_gain = (g * xhat).sum(axis=(0,) + axes)
        dxhat = g * gain.data.reshape(bshape)
        dx = inv_std * (
            dxhat
            - dxhat.mean(axis=axes, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True)
        )
        return dx, g_gain, g_shift

    return make_node(out, (x, gain, shift), bw, "instance_norm")


def unit_normalize(x, eps=1e-8):
    """Divide every channel vector (axis 1) by its L2 norm plus ``eps``."""
    norm = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    denom = norm + x.dtype.type(eps)
    out = x.data / denom

    def bw(g):
        safe = np.where(norm > 0, norm, 1.0)
        dot = (g * x.data).sum(axis=1, keepdims=True)
        return (g / denom - x.data * dot / (denom * denom * safe),)

    return make_node(out, (x,), bw, "unit_normalize")
