"""Autodiff tensor core, image ops, and gradient-check oracles."""

from .core import (
    DetachedInputWarning,
    GraphError,
    NonFiniteError,
    ShapeError,
    Tensor,
    absolute,
    add,
    backward,
    broadcast_to,
    concat,
    div,
    grad_enabled,
    matmul,
    maximum_scalar,
    mean,
    mul,
    narrow,
    neg,
    no_grad,
    ones,
    pad,
    pow_scalar,
    reshape,
    sigmoid,
    sqrt,
    sub,
    sum,
    transpose,
    zeros,
)
from .nn import (
    activation,
    batchnorm2d,
    col2im,
    concat_channels,
    conv2d,
    conv_transpose2d,
    depth_to_space2,
    im2col,
    maxpool2,
    relu,
    space_to_depth2,
)

__all__ = [
    "Tensor",
    "ShapeError",
    "NonFiniteError",
    "GraphError",
    "DetachedInputWarning",
    "no_grad",
    "grad_enabled",
    "backward",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "absolute",
    "pow_scalar",
    "maximum_scalar",
    "sqrt",
    "sigmoid",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "broadcast_to",
    "concat",
    "narrow",
    "pad",
    "matmul",
    "zeros",
    "ones",
    "im2col",
    "col2im",
    "depth_to_space2",
    "space_to_depth2",
    "conv2d",
    "conv_transpose2d",
    "maxpool2",
    "batchnorm2d",
    "concat_channels",
    "relu",
    "activation",
]
