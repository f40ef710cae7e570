from .core import (
    NonFiniteError,
    ShapeError,
    Tensor,
    UsageError,
    as_tensor,
    default_dtype,
    grad_enabled,
    no_grad,
    precision,
)
from .gradcheck import GradCheckResult, grad_check, grad_check64, rel_error
from .nn import (
    causal_conv1d,
    conv3d,
    filter1d_valid,
    instance_norm,
    linear,
    separable_filter3d,
    upsample_nearest,
)
from .ops import (
    abs,
    add,
    concat,
    div,
    exp,
    flip,
    getitem,
    log,
    mean,
    mul,
    relu,
    reshape,
    scalar_mul,
    sigmoid,
    silu,
    softplus,
    sqrt,
    square,
    stack,
    sub,
    sum,
    transpose,
)

__all__ = [name for name in dir() if not name.startswith("_")]
