"""Define-by-run reverse-mode autodiff over numpy arrays.

Every primitive records a vector-Jacobian product written in terms of other
primitives, so running ``backward(..., create_graph=True)`` records the
backward pass itself and the result can be differentiated again.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from ..errors import ParameterError, ShapeError

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def _grad_mode(enabled: bool):
    prev = is_grad_enabled()
    _state.enabled = enabled
    try:
        yield
    finally:
        _state.enabled = prev


def no_grad():
    """Context manager that stops graph recording (thread-local)."""
    return _grad_mode(False)


def enable_grad():
    return _grad_mode(True)


class Tensor:
    """An n-d array that may participate in a recorded computation graph."""

    __slots__ = ("data", "requires_grad", "_inputs", "_vjp", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._inputs: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return _wrap(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def _wrap(arr: np.ndarray) -> Tensor:
    t = Tensor.__new__(Tensor)
    t.data = arr
    t.requires_grad = False
    t._inputs = ()
    t._vjp = None
    t.name = None
    return t


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return _wrap(np.asarray(x, dtype=dtype) if dtype is not None else np.asarray(x, dtype=np.float64))


def _record(data: np.ndarray, inputs: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    out = _wrap(data)
    if is_grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._inputs = inputs
        out._vjp = vjp
    return out


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, a)
    b = as_tensor(b)
    return as_tensor(a, b), b


# ---------------------------------------------------------------- broadcasting

def sum_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Sum ``x`` down to ``shape`` (adjoint of broadcasting)."""
    shape = tuple(shape)
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, n in enumerate(shape) if n == 1 and x.shape[i + lead] != 1
    )
    data = x.data.sum(axis=axes, keepdims=True)
    if lead:
        data = data.reshape(data.shape[lead:])
    src = x.shape

    def vjp(g, need, y):
        return (broadcast_to(g, src),)

    return _record(data, (x,), vjp)


def broadcast_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    try:
        data = np.broadcast_to(x.data, shape)
    except ValueError as exc:
        raise ShapeError(f"broadcast_to: cannot broadcast {x.shape} to {shape}") from exc
    src = x.shape

    def vjp(g, need, y):
        return (sum_to(g, src),)

    return _record(data, (x,), vjp)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from exc


# ---------------------------------------------------------------- arithmetic

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("add", a, b)

    def vjp(g, need, y):
        return (sum_to(g, a.shape) if need[0] else None, sum_to(g, b.shape) if need[1] else None)

    return _record(a.data + b.data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("sub", a, b)

    def vjp(g, need, y):
        return (sum_to(g, a.shape) if need[0] else None, sum_to(neg(g), b.shape) if need[1] else None)

    return _record(a.data - b.data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("mul", a, b)

    def vjp(g, need, y):
        return (
            sum_to(mul(g, b), a.shape) if need[0] else None,
            sum_to(mul(g, a), b.shape) if need[1] else None,
        )

    return _record(a.data * b.data, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("div", a, b)

    def vjp(g, need, y):
        ga = sum_to(div(g, b), a.shape) if need[0] else None
        gb = sum_to(neg(div(mul(g, a), mul(b, b))), b.shape) if need[1] else None
        return ga, gb

    return _record(a.data / b.data, (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    def vjp(g, need, y):
        return (neg(g),)

    return _record(-a.data, (a,), vjp)


def power(a: Tensor, p: float) -> Tensor:
    """Elementwise ``a ** p`` for a constant exponent."""
    p = float(p)
    if p == 2.0:
        return mul(a, a)

    def vjp(g, need, y):
        return (mul(g, mul(power(a, p - 1.0), p)),)

    return _record(a.data ** p, (a,), vjp)


def square(a: Tensor) -> Tensor:
    return mul(a, a)


def sqrt(a: Tensor) -> Tensor:
    data = np.sqrt(a.data)
    def vjp(g, need, y):
        return (div(g, mul(y, 2.0)),)

    return _record(data, (a,), vjp)


def exp(a: Tensor) -> Tensor:
    def vjp(g, need, y):
        return (mul(g, y),)

    return _record(np.exp(a.data), (a,), vjp)


def log(a: Tensor) -> Tensor:
    def vjp(g, need, y):
        return (div(g, a),)

    return _record(np.log(a.data), (a,), vjp)


def tanh(a: Tensor) -> Tensor:
    def vjp(g, need, y):
        return (mul(g, sub(1.0, mul(y, y))),)

    return _record(np.tanh(a.data), (a,), vjp)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    e = np.exp(-np.abs(x))
    data = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    def vjp(g, need, y):
        return (mul(g, mul(y, sub(1.0, y))),)

    return _record(data, (a,), vjp)


def relu(a: Tensor) -> Tensor:
    # derivative at exactly 0 is 0
    mask = (a.data > 0).astype(a.dtype)

    def vjp(g, need, y):
        return (mul(g, _wrap(mask)),)

    return _record(a.data * mask, (a,), vjp)


def leaky_relu(a: Tensor, alpha: float = 0.2) -> Tensor:
    slope = np.where(a.data > 0, 1.0, alpha).astype(a.dtype)

    def vjp(g, need, y):
        return (mul(g, _wrap(slope)),)

    return _record(a.data * slope, (a,), vjp)


# ---------------------------------------------------------------- reductions / shape

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    data = a.data.sum(axis=axes, keepdims=keepdims)
    kept = tuple(1 if i in axes else n for i, n in enumerate(a.shape))
    src = a.shape

    def vjp(g, need, y):
        return (broadcast_to(reshape(g, kept), src),)

    return _record(np.asarray(data), (a,), vjp)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(tsum(a, axis, keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from exc
    src = a.shape

    def vjp(g, need, y):
        return (reshape(g, src),)

    return _record(data, (a,), vjp)


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))

    def vjp(g, need, y):
        return (transpose(g, inv),)

    return _record(a.data.transpose(axes), (a,), vjp)


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def getitem(a: Tensor, idx) -> Tensor:
    src = a.shape

    def vjp(g, need, y):
        return (scatter(g, idx, src),)

    return _record(np.asarray(a.data[idx]), (a,), vjp)


def scatter(g: Tensor, idx, shape) -> Tensor:
    """Embed ``g`` into zeros of ``shape`` at ``idx`` (adjoint of indexing)."""
    data = np.zeros(shape, dtype=g.dtype)
    np.add.at(data, idx, g.data)

    def vjp(h, need, y):
        return (getitem(h, idx),)

    return _record(data, (g,), vjp)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    axis = axis % tensors[0].ndim
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat: incompatible shapes {shapes} along axis {axis}") from exc
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def vjp(g, need, y):
        out = []
        for i, t in enumerate(tensors):
            if not need[i]:
                out.append(None)
                continue
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(int(bounds[i]), int(bounds[i + 1]))
            out.append(getitem(g, tuple(idx)))
        return tuple(out)

    return _record(data, tensors, vjp)


def pad(a: Tensor, widths) -> Tensor:
    """Zero-pad; ``widths`` is a per-axis sequence of (before, after)."""
    widths = tuple((int(lo), int(hi)) for lo, hi in widths)
    idx = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, a.shape))

    def vjp(g, need, y):
        return (getitem(g, idx),)

    return _record(np.pad(a.data, widths), (a,), vjp)


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from exc

    def vjp(g, need, y):
        ga = sum_to(matmul(g, swap_last(b)), a.shape) if need[0] else None
        gb = sum_to(matmul(swap_last(a), g), b.shape) if need[1] else None
        return ga, gb

    return _record(data, (a, b), vjp)


# ---------------------------------------------------------------- image primitives

def im2col(x: Tensor, kh: int, kw: int, stride: int) -> Tensor:
    """(N, C, H, W) -> (N*OH*OW, kh*kw*C) patch matrix, no padding.

    One row per output position lets a convolution run as a single tall,
    skinny GEMM. Within a row the channel index varies fastest, so every
    patch is filled by kh*kw contiguous slice copies from an NHWC view.
    """
    n, c, h, w = x.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"im2col: kernel {kh}x{kw} larger than input {h}x{w}")
    xh = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1))
    cols = np.empty((n, oh, ow, kh, kw, c), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j] = xh[:, i:i + stride * oh:stride, j:j + stride * ow:stride]
    src = x.shape

    def vjp(g, need, y):
        return (col2im(g, kh, kw, stride, src),)

    return _record(cols.reshape(n * oh * ow, kh * kw * c), (x,), vjp)


def col2im(cols: Tensor, kh: int, kw: int, stride: int, shape) -> Tensor:
    """Adjoint of :func:`im2col`: scatter-add patches back to ``shape``."""
    n, c, h, w = shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    g = cols.data.reshape(n, oh, ow, kh, kw, c)
    out = np.zeros((n, h, w, c), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, i:i + stride * oh:stride, j:j + stride * ow:stride] += g[:, :, :, i, j]
    out = out.transpose(0, 3, 1, 2)

    def vjp(h_, need, y):
        return (im2col(h_, kh, kw, stride),)

    return _record(out, (cols,), vjp)


def maxpool2x2(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2: spatial dims must be even, got {h}x{w}")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    arg = blocks.argmax(axis=-1)
    data = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    onehot = np.zeros_like(blocks)
    np.put_along_axis(onehot, arg[..., None], 1.0, axis=-1)
    mask = onehot.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)

    def vjp(g, need, y):
        return (mul(upsample2x(g), _wrap(mask)),)

    return _record(data, (x,), vjp)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling of the two trailing axes."""
    n, c, h, w = x.shape
    y = broadcast_to(reshape(x, (n, c, h, 1, w, 1)), (n, c, h, 2, w, 2))
    return reshape(y, (n, c, 2 * h, 2 * w))


# ---------------------------------------------------------------- backward

def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for inp in node._inputs:
            if inp.requires_grad and id(inp) not in seen:
                stack.append((inp, False))
    return order


def backward(output: Tensor, wrt: Iterable[Tensor], create_graph: bool = False) -> list[Tensor]:
    """Gradients of the scalar ``output`` with respect to each tensor in ``wrt``.

    With ``create_graph`` the backward pass is recorded, so the returned
    gradients can themselves be differentiated. Tensors that ``output`` does
    not depend on get an all-zero gradient.
    """
    wrt = list(wrt)
    if output.size != 1:
        raise ParameterError(f"backward: output must be a scalar, got shape {output.shape}")
    for t in wrt:
        if not t.requires_grad:
            raise ParameterError("backward: every wrt tensor must have requires_grad=True")
    targets = {id(t) for t in wrt}
    grads: dict[int, Tensor] = {}
    if output.requires_grad:
        order = _topo(output)
        needed: dict[int, bool] = {}
        for node in order:
            needed[id(node)] = id(node) in targets or any(needed.get(id(i), False) for i in node._inputs)
        grads[id(output)] = _wrap(np.ones_like(output.data))
        with _grad_mode(create_graph):
            for node in reversed(order):
                if node._vjp is None or not needed[id(node)]:
                    continue
                g = grads.get(id(node))
                if g is None:
                    continue
                if id(node) not in targets:
                    del grads[id(node)]
                need = tuple(needed.get(id(i), False) for i in node._inputs)
                for inp, gi in zip(node._inputs, node._vjp(g, need, node)):
                    if gi is None or not needed.get(id(inp), False):
                        continue
                    prev = grads.get(id(inp))
                    grads[id(inp)] = gi if prev is None else add(prev, gi)
    out = []
    for t in wrt:
        g = grads.get(id(t))
        out.append(g if g is not None else _wrap(np.zeros_like(t.data)))
    return out


grad = backward
