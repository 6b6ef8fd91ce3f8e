"""Minimal reverse-mode autodiff used by the model and losses."""

from .check import GradCheckReport, closed_form_infonce_grad, finite_diff_check, relative_error
from .core import (
    Tape,
    Tensor,
    absolute,
    add,
    as_tensor,
    attention_precision,
    backward,
    concat,
    cross_entropy,
    div,
    exp,
    gather_rows,
    gelu,
    l2_normalize,
    layer_norm,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    multi_head_attention,
    neg,
    reshape,
    row_sum,
    scale,
    slice_rows,
    softmax,
    sub,
    take_along_rows,
    total,
    transpose,
)

__all__ = [
    "GradCheckReport",
    "Tape",
    "Tensor",
    "absolute",
    "add",
    "as_tensor",
    "attention_precision",
    "backward",
    "closed_form_infonce_grad",
    "concat",
    "cross_entropy",
    "div",
    "exp",
    "finite_diff_check",
    "gather_rows",
    "gelu",
    "l2_normalize",
    "layer_norm",
    "log",
    "log_softmax",
    "matmul",
    "mean",
    "mul",
    "multi_head_attention",
    "neg",
    "relative_error",
    "reshape",
    "row_sum",
    "scale",
    "slice_rows",
    "softmax",
    "sub",
    "take_along_rows",
    "total",
    "transpose",
]
