"""Minimal differentiable-network core: tensors, layers, Adam, grad checking."""

from .autodiff import (
    Tape,
    Tensor,
    add,
    as_tensor,
    backward,
    concat,
    cross_entropy,
    exp,
    gather_rows,
    log,
    matmul,
    mul,
    relu,
    reshape,
    sigmoid,
    softmax,
    sub,
    sum_all,
    sum_groups,
    sum_last_keepdims,
    tanh,
)
from .checkpoint import load_tensors, save_tensors
from .gradcheck import grad_check
from .layers import Dense, GRUCell, ParamStore
from .optim import adam_step, clip_grad_norm, grad_norm

__all__ = [
    "Tape", "Tensor", "add", "as_tensor", "backward", "concat", "cross_entropy",
    "exp", "gather_rows", "log", "matmul", "mul", "relu", "reshape", "sigmoid", "softmax",
    "sub", "sum_all", "sum_groups", "sum_last_keepdims", "tanh",
    "load_tensors", "save_tensors", "grad_check",
    "Dense", "GRUCell", "ParamStore",
    "adam_step", "clip_grad_norm", "grad_norm",
]
