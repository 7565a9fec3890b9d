"""Float64 tensors with reverse-mode differentiation and image kernels."""

from .ops import (
    add,
    bilinear_resize,
    concat,
    conv2d,
    div,
    gelu,
    layer_norm,
    matmul,
    maximum,
    mean,
    mul,
    neg,
    relu,
    reshape,
    resize_matrix,
    softmax_lastdim,
    sub,
    sum,
    take,
    transpose,
    vector_norm,
)
from .rng import Rng
from .tensor import (
    ContractError,
    DimensionError,
    Gradients,
    NonFiniteError,
    Tape,
    Tensor,
    active_tape,
    as_tensor,
    backward,
)

__all__ = [
    "ContractError", "DimensionError", "Gradients", "NonFiniteError", "Rng", "Tape",
    "Tensor", "active_tape", "add", "as_tensor", "backward", "bilinear_resize", "concat",
    "conv2d", "div", "gelu", "layer_norm", "matmul", "maximum", "mean", "mul", "neg",
    "relu", "reshape", "resize_matrix", "softmax_lastdim", "sub", "sum", "take",
    "transpose", "vector_norm",
]
