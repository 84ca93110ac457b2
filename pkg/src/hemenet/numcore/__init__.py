"""Reverse-mode autodiff over numpy buffers, parameter storage,
optimizers, gradient checking and binary checkpoints."""

from .tensor import (
    Tensor,
    no_grad,
    grad_enabled,
    add,
    sub,
    mul,
    div,
    neg,
    power,
    matmul,
    frobenius_norm,
    pairwise_distance,
    concat,
    reshape,
    transpose,
    gather_rows,
    segment_sum,
    tsum,
    tmean,
    masked_sum,
    masked_mean,
    sigmoid,
    silu,
    relu,
    exp,
    log,
    softmax,
    binary_cross_entropy_with_logits,
    batch_norm,
    layer_norm,
)
from .params import (
    ParamStore,
    OptimConfig,
    optimizer_step,
    glorot_uniform,
    unit_rows,
    grad_check,
    GradCheckReport,
)
from .checkpoint import write_tensors, read_tensors, save_store, load_store

__all__ = [
    "Tensor",
    "no_grad",
    "grad_enabled",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "power",
    "matmul",
    "frobenius_norm",
    "pairwise_distance",
    "concat",
    "reshape",
    "transpose",
    "gather_rows",
    "segment_sum",
    "tsum",
    "tmean",
    "masked_sum",
    "masked_mean",
    "sigmoid",
    "silu",
    "relu",
    "exp",
    "log",
    "softmax",
    "binary_cross_entropy_with_logits",
    "batch_norm",
    "layer_norm",
    "ParamStore",
    "OptimConfig",
    "optimizer_step",
    "glorot_uniform",
    "unit_rows",
    "grad_check",
    "GradCheckReport",
    "write_tensors",
    "read_tensors",
    "save_store",
    "load_store",
]
