from .tensor import (
    Tensor,
    add,
    backward,
    gelu,
    index_rows,
    layer_norm,
    matmul,
    mul,
    no_grad,
    reshape,
    scale,
    set_debug_checks,
    softmax,
    transpose,
    tsum,
)
from . import functional
from .optim import AdamWState, LrSchedule, adamw_step, clip_grad_norm, init_adamw, lr_at, zero_grads
from .checkpoint import (
    load_optimizer,
    load_params_into,
    load_tensors,
    optimizer_path,
    save_optimizer,
    save_params,
    save_tensors,
)

__all__ = [
    "Tensor",
    "add",
    "backward",
    "gelu",
    "index_rows",
    "layer_norm",
    "matmul",
    "mul",
    "no_grad",
    "reshape",
    "scale",
    "set_debug_checks",
    "softmax",
    "transpose",
    "tsum",
    "functional",
    "AdamWState",
    "LrSchedule",
    "adamw_step",
    "clip_grad_norm",
    "init_adamw",
    "lr_at",
    "zero_grads",
    "load_optimizer",
    "load_params_into",
    "load_tensors",
    "optimizer_path",
    "save_optimizer",
    "save_params",
    "save_tensors",
]
