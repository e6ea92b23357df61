"""Minimal dense tensor engine with reverse-mode automatic differentiation."""
from .core import (
    Tensor,
    add,
    as_tensor,
    backward,
    concat,
    div,
    exp,
    getitem,
    is_grad_enabled,
    log,
    make_node,
    mean,
    mul,
    neg,
    no_grad,
    permute,
    reshape,
    split,
    sub,
    tsum,
    unbroadcast,
)
from .gradcheck import GradCheckReport, grad_check
from .ops import (
    causal_conv1d,
    conv3d,
    conv3d_output_shape,
    gelu,
    interp_matrix,
    layer_norm,
    linear,
    log_softmax,
    matmul,
    sigmoid,
    silu,
    softmax,
    softplus,
    upsample_trilinear,
)

__all__ = [name for name in dir() if not name.startswith("_")]
