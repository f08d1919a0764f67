from .tensor import (
    GradTape,
    Tensor,
    add,
    as_tensor,
    clamp_min,
    concat,
    div,
    exp,
    grad_enabled,
    log,
    matmul,
    mean,
    mul,
    no_grad,
    relu,
    reshape,
    softplus,
    sqrt,
    stack,
    sub,
    tmax,
    tsum,
)
from .functional import (
    batch_norm,
    conv2d,
    flip_horizontal,
    global_avg_pool,
    l2_normalize,
    log_softmax,
    rotate90,
    softmax,
)
from .gradcheck import GradCheckError, check_gradients, gradient_report

__all__ = [
    "GradTape", "Tensor", "add", "as_tensor", "clamp_min", "concat", "div", "exp",
    "grad_enabled", "log", "matmul", "mean", "mul", "no_grad", "relu", "reshape",
    "softplus", "sqrt", "stack", "sub", "tmax", "tsum", "batch_norm", "conv2d",
    "flip_horizontal", "global_avg_pool", "l2_normalize", "log_softmax", "rotate90",
    "softmax", "GradCheckError", "check_gradients", "gradient_report",
]
