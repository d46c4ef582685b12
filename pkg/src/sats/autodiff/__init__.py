"""Minimal reverse-mode automatic differentiation over numpy arrays."""

from .conv import conv3d, conv_transpose3d
from .ops import (
    add,
    concat,
    div,
    flip,
    instance_norm,
    leaky_relu,
    log,
    maximum,
    mean,
    mul,
    neg,
    relu,
    sigmoid,
    softplus,
    sqrt,
    square,
    sub,
    sum,
    unit_normalize,
)
from .tensor import Tensor, as_tensor, backward, grad_enabled, no_grad

__all__ = [
    "Tensor", "as_tensor", "backward", "grad_enabled", "no_grad",
    "add", "sub", "mul", "div", "neg", "sum", "mean", "square", "sqrt", "log",
    "sigmoid", "softplus", "maximum", "relu", "leaky_relu", "concat", "flip",
    "instance_norm", "unit_normalize", "conv3d", "conv_transpose3d",
]
