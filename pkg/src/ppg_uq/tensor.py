"""Dense float32 tensors with reverse-mode automatic differentiation.

The op set is deliberately small: exactly what the 1D conv classifier and the
1D ResNet need (conv/pool/batchnorm/activations) plus the reductions used by
the likelihood losses.  Arrays are numpy ``float32``; every op records a
closure that maps the output gradient to parent gradients.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .rng import RngStream

DTYPE = np.float32

_grad_enabled = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (evaluation passes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the tensor dtype (float64 is for finite-difference checks).

    Tensors built inside the block, including freshly built models, hold ``dtype``.
    """
    global DTYPE
    prev = DTYPE
    DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        DTYPE = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None, _op=""):
        arr = np.asarray(data, dtype=DTYPE)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable | None = _backward
        self._op = _op

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{rg})"

    # -- autograd ---------------------------------------------------------
    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for all requires_grad leaves."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=DTYPE)
            if grad.shape != self.shape:
                raise ShapeError(f"seed gradient shape {grad.shape} != tensor shape {self.shape}")
        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                pg = np.asarray(pg, dtype=DTYPE)
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def _raise_not_scalar(t: Tensor):
    raise ValueError(f"item() needs a single-element tensor, got shape {t.shape}")


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, _op=op)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward, _op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bw, "div")


def square(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return _make(x.data * x.data, (x,), lambda g: (2.0 * x.data * g,), "square")


def sqrt(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (0.5 * g / out,), "sqrt")


def exp(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def clamp_min(x: Tensor, floor: float) -> Tensor:
    x = as_tensor(x)
    keep = x.data >= floor
    return _make(np.maximum(x.data, floor), (x,), lambda g: (g * keep,), "clamp_min")


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    if not 0.0 <= slope <= 1.0:
        raise ValueError(f"leaky_relu slope must lie in [0, 1], got {slope}")
    out = np.maximum(x.data, x.data * DTYPE(slope))
    pos = x.data > 0 if is_grad_enabled() else None
    return _make(out, (x,), lambda g: (np.where(pos, g, g * DTYPE(slope)),), "leaky_relu")


def softplus(x: Tensor) -> Tensor:
    d = x.data
    out = np.maximum(d, 0) + np.log1p(np.exp(-np.abs(d)))
    sig = 0.5 * (1.0 + np.tanh(0.5 * d))
    return _make(out, (x,), lambda g: (g * sig,), "softplus")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (x,), bw, "softmax")


# ---------------------------------------------------------------------------
# reductions / shape
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _make(out, (x,), bw, "mean")


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view shape {x.shape} as {tuple(shape)}") from None
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def getitem(x: Tensor, idx) -> Tensor:
    out = x.data[idx]
    basic = _is_basic_index(idx)

    def bw(g):
        full = np.zeros_like(x.data)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(out, (x,), bw, "getitem")


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


# ---------------------------------------------------------------------------
# linear algebra / convolution / pooling
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def bw(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def conv_output_length(length: int, kernel: int, stride: int = 1, padding: int = 0) -> int:
    return (length + 2 * padding - kernel) // stride + 1


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (N, C, L) with ``w`` (O, C, K), zero padding."""
    if x.ndim != 3 or w.ndim != 3 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv1d: input {x.shape} incompatible with weight {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"conv1d: bias {b.shape} incompatible with weight {w.shape}")
    n, c, length = x.shape
    o, _, k = w.shape
    lout = conv_output_length(length, k, stride, padding)
    if lout < 1:
        raise ShapeError(f"conv1d: input {x.shape} too short for kernel {k}, stride {stride}, padding {padding}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    lp = xp.shape[2]
    span = stride * (lout - 1) + 1
    if o * lp < c * lout:
        # one GEMM applies every tap at every position; taps are then shift-added
        wk = np.ascontiguousarray(w.data.transpose(2, 0, 1)).reshape(k * o, c)
        y = np.matmul(wk, xp).reshape(n, k, o, lp)
        out = y[:, 0, :, 0:span:stride].copy()
        for j in range(1, k):
            out += y[:, j, :, j:j + span:stride]
        del y
    else:
        win = sliding_window_view(xp, k, axis=2)[:, :, 0:span:stride]
        cols = np.ascontiguousarray(win.transpose(0, 1, 3, 2)).reshape(n, c * k, lout)
        out = np.matmul(w.data.reshape(o, c * k), cols)
    if b is not None:
        out += b.data[None, :, None]

    def bw(g):
        gw = gb = gx = None
        if w.requires_grad:
            win = sliding_window_view(xp, k, axis=2)[:, :, ::stride][:, :, :lout]
            cols = np.ascontiguousarray(win.transpose(0, 2, 1, 3)).reshape(n * lout, c * k)
            gt = np.ascontiguousarray(g.transpose(1, 0, 2)).reshape(o, n * lout)
            gw = (gt @ cols).reshape(o, c, k)
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2))
        if x.requires_grad:
            gxp = np.zeros((n, c, lp), dtype=DTYPE)
            if c <= o or stride > 1:
                # scatter each tap's contribution back to its input positions
                wt = np.ascontiguousarray(w.data.transpose(2, 1, 0)).reshape(k * c, o)
                z = np.matmul(wt, g).reshape(n, k, c, lout)
                for j in range(k):
                    gxp[:, :, j:j + span:stride] += z[:, j]
            else:
                # full correlation of g with the flipped kernel
                gpad = np.pad(g, ((0, 0), (0, 0), (k - 1, k - 1)))
                lf = lout + k - 1
                gcols = np.ascontiguousarray(sliding_window_view(gpad, k, axis=2).transpose(0, 1, 3, 2))
                wf = np.ascontiguousarray(w.data[:, :, ::-1].transpose(1, 0, 2)).reshape(c, o * k)
                gxp[:, :, :lf] = np.matmul(wf, gcols.reshape(n, o * k, lf))
            gx = gxp[:, :, padding:padding + length]
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, (lambda g: bw(g)[:2]) if b is None else bw, "conv1d")


def maxpool1d(x: Tensor, kernel: int, stride: int | None = None, padding: int = 0) -> Tensor:
    stride = kernel if stride is None else stride
    if x.ndim != 3:
        raise ShapeError(f"maxpool1d: expected (N, C, L) input, got {x.shape}")
    n, c, length = x.shape
    lout = conv_output_length(length, kernel, stride, padding)
    if lout < 1:
        raise ShapeError(f"maxpool1d: input {x.shape} too short for kernel {kernel}")
    if kernel == 2 and stride == 2 and padding == 0:
        return _maxpool_pairs(x, lout)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding)), constant_values=-np.inf) if padding else x.data
    win = sliding_window_view(xp, kernel, axis=2)[:, :, ::stride][:, :, :lout]
    arg = win.argmax(axis=3)
    out = np.take_along_axis(win, arg[..., None], axis=3)[..., 0]

    def bw(g):
        gxp = np.zeros(xp.shape, dtype=DTYPE)
        for j in range(kernel):
            view = gxp[:, :, j:j + (lout - 1) * stride + 1:stride]
            view += np.where(arg == j, g, 0.0)
        return (gxp[:, :, padding:padding + length],)

    return _make(out, (x,), bw, "maxpool1d")


def _maxpool_pairs(x: Tensor, lout: int) -> Tensor:
    a = x.data[:, :, 0:2 * lout:2]
    b = x.data[:, :, 1:2 * lout:2]
    out = np.maximum(a, b)
    first = a >= b if is_grad_enabled() else None

    def bw(g):
        gx = np.zeros(x.shape, dtype=DTYPE)
        gx[:, :, 0:2 * lout:2] = np.where(first, g, 0.0)
        gx[:, :, 1:2 * lout:2] = np.where(first, 0.0, g)
        return (gx,)

    return _make(out, (x,), bw, "maxpool1d")


def avgpool1d(x: Tensor, kernel: int, stride: int | None = None) -> Tensor:
    stride = kernel if stride is None else stride
    if x.ndim != 3:
        raise ShapeError(f"avgpool1d: expected (N, C, L) input, got {x.shape}")
    n, c, length = x.shape
    lout = conv_output_length(length, kernel, stride)
    if lout < 1:
        raise ShapeError(f"avgpool1d: input {x.shape} too short for kernel {kernel}")
    win = sliding_window_view(x.data, kernel, axis=2)[:, :, ::stride][:, :, :lout]
    out = win.mean(axis=3)

    def bw(g):
        gx = np.zeros(x.shape, dtype=DTYPE)
        for j in range(kernel):
            gx[:, :, j:j + (lout - 1) * stride + 1:stride] += g / kernel
        return (gx,)

    return _make(out, (x,), bw, "avgpool1d")


def adaptive_pool_matrix(length: int, out_len: int) -> np.ndarray:
    """(length, out_len) averaging matrix; bin i spans [floor(iL/n), ceil((i+1)L/n))."""
    m = np.zeros((length, out_len), dtype=DTYPE)
    for i in range(out_len):
        start = (i * length) // out_len
        end = -((-(i + 1) * length) // out_len)
        m[start:end, i] = 1.0 / (end - start)
    return m


def adaptive_avgpool1d(x: Tensor, out_len: int) -> Tensor:
    if x.ndim != 3:
        raise ShapeError(f"adaptive_avgpool1d: expected (N, C, L) input, got {x.shape}")
    m = adaptive_pool_matrix(x.shape[2], out_len)
    out = x.data @ m
    return _make(out, (x,), lambda g: (g @ m.T,), "adaptive_avgpool1d")


def batchnorm1d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
                training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Batch normalisation over (N, L) per channel.  Updates running stats in place when training."""
    if x.ndim != 3 or gamma.shape != (x.shape[1],):
        raise ShapeError(f"batchnorm1d: input {x.shape} incompatible with {gamma.shape[0]} channels")
    axes = (0, 2)
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        count = x.shape[0] * x.shape[2]
        unbiased = var * count / max(count - 1, 1)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mu, var = running_mean, running_var
    inv = (1.0 / np.sqrt(var + eps)).astype(DTYPE)
    xhat = (x.data - mu[None, :, None]) * inv[None, :, None]
    out = xhat * gamma.data[None, :, None] + beta.data[None, :, None]

    def bw(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data[None, :, None]
            if training:
                m = x.shape[0] * x.shape[2]
                gx = (inv[None, :, None] / m) * (
                    m * gxhat
                    - gxhat.sum(axis=axes, keepdims=True)
                    - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True)
                )
            else:
                gx = gxhat * inv[None, :, None]
        return gx, gg, gb

    return _make(out, (x, gamma, beta), bw, "batchnorm1d")


# ---------------------------------------------------------------------------
# dropout
# ---------------------------------------------------------------------------

DROPOUT_LEVELS = 1 << 16


def dropout(x: Tensor, rate: float, rng: RngStream | None, active: bool) -> Tensor:
    """Inverted dropout: zero with probability ``rate``, scale survivors by 1/(1-rate).

    Masks come from 16-bit uniform draws, so the realised rate is ``rate``
    rounded to a multiple of 2**-16 (the survivor scale uses that exact rate).
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not active or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("active dropout needs an RngStream")
    cut = int(round(rate * DROPOUT_LEVELS))
    size = x.data.size
    bits = rng.generator.bit_generator.random_raw((size + 3) // 4).view(np.uint16)[:size]
    keep = (bits >= cut).reshape(x.shape)
    scale = DTYPE(DROPOUT_LEVELS / (DROPOUT_LEVELS - cut))
    out = np.where(keep, x.data * scale, DTYPE(0))
    return _make(out, (x,), lambda g: (np.where(keep, g * scale, DTYPE(0)),), "dropout")
