"""Differentiable-computation substrate: tensors, layers, optimizer, checks."""

from .checkpoint import canonical_json, load_checkpoint, save_checkpoint
from .gradcheck import GradCheckReport, grad_check
from .layers import Context, gru_step, linear
from .optim import RmsProp, rmsprop_step
from .params import (
    ParameterStore,
    RngState,
    hash_seed,
    init_embedding,
    init_gru,
    init_linear,
)
from .tensor import (
    PROB_FLOOR,
    Tensor,
    add,
    as_array,
    concat,
    constant,
    cross_entropy,
    dropout,
    matmul,
    mul,
    neg,
    reshape,
    sigmoid,
    softmax,
    stack_rows,
    sum_all,
    take_row,
    take_rows,
    tanh,
    transpose,
)

__all__ = [
    "Context", "GradCheckReport", "ParameterStore", "PROB_FLOOR", "RmsProp",
    "RngState", "Tensor", "add", "as_array", "canonical_json", "concat",
    "constant", "cross_entropy", "dropout", "grad_check", "gru_step",
    "hash_seed", "init_embedding", "init_gru", "init_linear", "linear",
    "load_checkpoint", "matmul", "mul", "neg", "reshape",
    "rmsprop_step", "save_checkpoint", "sigmoid", "softmax", "stack_rows",
    "sum_all", "take_row", "take_rows", "tanh", "transpose",
]
