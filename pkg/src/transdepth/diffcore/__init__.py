"""Minimal reverse-mode differentiation over dense float64 arrays."""

from .ops import (
    abs,
    add,
    avg_pool2d,
    bilinear_sample,
    concat,
    conv2d,
    conv3d,
    div,
    exp,
    getitem,
    maxpool3d,
    mean,
    mul,
    relu,
    reshape,
    resize_bilinear,
    softmax_over_axis,
    sqrt,
    square,
    stack,
    sub,
    sum,
    upsample2d,
    upsample3d,
    where,
)
from .tensor import Gradients, Parameter, Tape, Tensor, active_tape, as_tensor, backward

__all__ = [
    "Gradients", "Parameter", "Tape", "Tensor", "active_tape", "as_tensor", "backward",
    "abs", "add", "avg_pool2d", "bilinear_sample", "concat", "conv2d", "conv3d", "div",
    "exp", "getitem", "maxpool3d", "mean", "mul", "relu", "reshape", "resize_bilinear",
    "softmax_over_axis", "sqrt", "square", "stack", "sub", "sum", "upsample2d",
    "upsample3d", "where",
]
