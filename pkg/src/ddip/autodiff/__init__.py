"""Minimal reverse-mode autodiff engine."""
from .gradcheck import GradCheckResult, grad_check
from .optim import AdamW
from .tensor import (
    Tensor,
    absolute,
    add,
    as_tensor,
    avg_pool2x,
    backward,
    batch_dot,
    broadcast_to,
    concat,
    conv2d,
    cos,
    div,
    enable_grad,
    exp,
    getitem,
    grad,
    group_norm,
    is_grad_enabled,
    l1_norm,
    linear_map,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    norm,
    relu,
    reshape,
    scale,
    sigmoid,
    silu,
    sin,
    soft_threshold,
    softmax,
    sq_norm,
    sqrt,
    square,
    stack,
    sub,
    transpose,
    tsum,
    upsample_nearest2x,
)

__all__ = [name for name in dir() if not name.startswith("_")]
