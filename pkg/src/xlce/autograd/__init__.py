"""Minimal reverse-mode automatic differentiation on numpy arrays."""

from xlce.autograd.gradcheck import grad_check
from xlce.autograd.nn import (
    causal_mask,
    conv2d,
    gelu,
    layer_norm,
    linear,
    mse_sum,
    multi_head_attention,
    softmax_rows,
)
from xlce.autograd.tensor import (
    Parameter,
    ShapeError,
    Tensor,
    add,
    as_tensor,
    backward,
    concat,
    getitem,
    matmul,
    mean,
    mul,
    permute,
    reshape,
    sub,
    swap_last,
    tsum,
)

__all__ = [
    "Parameter",
    "ShapeError",
    "Tensor",
    "add",
    "as_tensor",
    "backward",
    "causal_mask",
    "concat",
    "conv2d",
    "gelu",
    "getitem",
    "grad_check",
    "layer_norm",
    "linear",
    "matmul",
    "mean",
    "mse_sum",
    "mul",
    "multi_head_attention",
    "permute",
    "reshape",
    "softmax_rows",
    "sub",
    "swap_last",
    "tsum",
]
