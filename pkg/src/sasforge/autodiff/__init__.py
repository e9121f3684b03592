"""Reverse-mode autodiff with higher-order gradients."""

from .nn import conv2d, glorot_uniform, instance_norm, l2_norm_per_sample, linear
from .optim import Adam, AdamState, adam_step
from .tensor import (
    Tensor,
    add,
    as_tensor,
    backward,
    broadcast_to,
    col2im,
    concat,
    div,
    enable_grad,
    exp,
    getitem,
    grad,
    im2col,
    is_grad_enabled,
    leaky_relu,
    log,
    matmul,
    maxpool2x2,
    mean,
    mul,
    neg,
    no_grad,
    pad,
    power,
    relu,
    reshape,
    sigmoid,
    sqrt,
    square,
    sub,
    sum_to,
    tanh,
    transpose,
    tsum,
    upsample2x,
)

sum = tsum  # noqa: A001

__all__ = [name for name in dir() if not name.startswith("_")]
