"""Small reverse-mode autodiff engine on top of numpy."""

from vardfs.diffcore import ops
from vardfs.diffcore.ops import (
    add,
    concat,
    cross_entropy,
    div,
    exp,
    layer_norm,
    linear,
    log,
    log_softmax,
    masked_softmax,
    matmul,
    maximum,
    mean,
    mean_pool,
    mul,
    relu,
    reshape,
    scale,
    sin,
    softmax,
    sub,
    sum,
    tanh,
    transpose,
)
from vardfs.diffcore.optim import Adam, AdamState, adam_step
from vardfs.diffcore.tensor import Tensor, as_tensor, backward, grad_enabled, no_grad, tape

__all__ = [
    "Adam", "AdamState", "Tensor", "adam_step", "add", "as_tensor", "backward", "concat",
    "cross_entropy", "div", "exp", "grad_enabled", "layer_norm", "linear", "log", "log_softmax",
    "masked_softmax", "matmul", "maximum", "mean", "mean_pool", "mul", "no_grad", "ops", "relu",
    "reshape", "scale", "sin", "softmax", "sub", "sum", "tanh", "tape", "transpose",
]
