"""Minimal dense-tensor arithmetic with reverse-mode autodiff and Adam."""

from . import tensor as ops
from .optim import AdamState, OptimizerError, adam_step
from .tensor import (
    GradientError,
    LabelError,
    ShapeError,
    Tensor,
    TilingError,
    backward,
    concat,
    conv1d,
    cross_entropy,
    dropout,
    gelu,
    layer_norm,
    matmul,
    mse,
    reset_grads,
    softmax,
    stack,
    tensor,
    zeros,
)

__all__ = [
    "AdamState",
    "OptimizerError",
    "adam_step",
    "GradientError",
    "LabelError",
    "ShapeError",
    "Tensor",
    "TilingError",
    "backward",
    "concat",
    "conv1d",
    "cross_entropy",
    "dropout",
    "gelu",
    "layer_norm",
    "matmul",
    "mse",
    "ops",
    "reset_grads",
    "softmax",
    "stack",
    "tensor",
    "zeros",
]
