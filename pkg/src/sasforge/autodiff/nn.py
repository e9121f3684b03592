"""Network-level primitives composed from the core tensor ops."""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError
from .tensor import (
    Tensor,
    add,
    im2col,
    matmul,
    mean,
    mul,
    pad,
    reshape,
    sqrt,
    sub,
    swap_last,
    transpose,
    tsum,
)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation over NCHW input with OIHW weights and zero padding.

    Output spatial size is ``floor((n + 2*padding - k) / stride) + 1``.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d input and weight, got {x.shape} and {w.shape}")
    n, cin, h, wd = x.shape
    cout, wcin, kh, kw = w.shape
    if cin != wcin:
        raise ShapeError(f"conv2d: input has {cin} channels but weight {w.shape} expects {wcin}")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {b.shape} does not match {cout} output channels")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} does not fit input {h}x{wd} with padding {padding}")
    if padding:
        x = pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = im2col(x, kh, kw, stride)
    # patch rows are ordered (kh, kw, cin); permute the OIHW weight to match
    wmat = reshape(transpose(w, (0, 2, 3, 1)), (cout, kh * kw * cin))
    out = matmul(cols, swap_last(wmat))
    out = transpose(reshape(out, (n, oh, ow, cout)), (0, 3, 1, 2))
    if b is not None:
        out = add(out, reshape(b, (1, cout, 1, 1)))
    return out


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T + b`` with ``w`` shaped (out_features, in_features)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    out = matmul(x, swap_last(w))
    if b is not None:
        out = add(out, b)
    return out


def l2_norm_per_sample(x: Tensor, eps: float = 0.0) -> Tensor:
    """Euclidean norm over every axis but the first; shape (N,)."""
    axes = tuple(range(1, x.ndim))
    return sqrt(add(tsum(mul(x, x), axes), eps))


def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    mu = mean(x, (2, 3), keepdims=True)
    centered = sub(x, mu)
    var = mean(mul(centered, centered), (2, 3), keepdims=True)
    return centered / sqrt(add(var, eps))


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype=np.float32, scale: float = 1.0):
    limit = scale * np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)
