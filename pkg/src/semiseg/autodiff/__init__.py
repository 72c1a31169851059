from .tensor import (
    ShapeError,
    Tensor,
    as_tensor,
    backward,
    build_tape,
    default_dtype,
    get_default_dtype,
    is_grad_enabled,
    no_grad,
    set_default_dtype,
)
from .functional import (
    add,
    batchnorm2d,
    concat,
    conv2d,
    conv_transpose2d,
    div,
    exp,
    getitem,
    leaky_relu,
    log,
    log_softmax,
    logsumexp,
    matmul,
    mean,
    mul,
    neg,
    power,
    relu,
    reshape,
    sigmoid,
    softmax,
    softmax_channels,
    sub,
    sum,
    tanh,
    transpose,
)
from .gradcheck import GradCheckResult, gradcheck

__all__ = [name for name in dir() if not name.startswith("_")]
