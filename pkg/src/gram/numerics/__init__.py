from gram.numerics.tensor import (
    Tensor,
    add,
    as_tensor,
    backward,
    bmm,
    clamp,
    concat,
    concat_last,
    embedding,
    exp,
    gaussian_reparam,
    graft,
    grad_enabled,
    linear,
    matmul,
    mean_all,
    mul,
    neg,
    no_grad,
    parameter,
    reshape,
    rms_norm,
    rope,
    scale,
    set_debug_checks,
    sigmoid,
    silu,
    slice_axis,
    softmax_cross_entropy,
    softmax_last,
    sub,
    sum_all,
    sum_last,
    transpose,
)
from gram.numerics.rng import RngStream
from gram.numerics.layers import (
    AttentionBlockParams,
    AttentionParams,
    SwigluBlockParams,
    SwigluParams,
    attention_block,
    rope_tables,
    self_attention,
    swiglu_block,
    swiglu_mlp,
)
from gram.numerics.gradcheck import GradCheckReport, finite_diff_check

__all__ = [
    "Tensor", "RngStream", "GradCheckReport", "finite_diff_check",
    "AttentionBlockParams", "AttentionParams", "SwigluBlockParams", "SwigluParams",
    "attention_block", "swiglu_block", "swiglu_mlp", "self_attention", "rope_tables",
    "add", "as_tensor", "backward", "bmm", "clamp", "concat", "concat_last", "embedding",
    "exp", "gaussian_reparam", "graft", "grad_enabled", "linear", "matmul",
    "mean_all", "mul", "neg", "no_grad", "parameter", "reshape", "rms_norm",
    "rope", "scale", "set_debug_checks", "sigmoid", "silu", "slice_axis",
    "softmax_cross_entropy", "softmax_last", "sub", "sum_all", "sum_last", "transpose",
]
