"""Reverse-mode automatic differentiation over float32 numpy arrays.

Every differentiable function below returns a :class:`Tensor` that remembers
its parents and a closure mapping the output gradient to parent gradients.
``Tensor.backward`` walks the recorded graph in reverse topological order.
Leaf tensors created with ``requires_grad=True`` accumulate into ``.grad``;
for SuperNet parameters that buffer is a view into the ParamStore.
"""
from __future__ import annotations

import contextlib
import os
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import DataError, StructuralError, UsageError

DTYPE = np.float32
CHECK_FINITE = bool(os.environ.get("EVONAS_CHECK_FINITE"))

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Skip graph recording (inference only)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_on_reached", "name")

    def __init__(self, data, requires_grad: bool = False, grad: np.ndarray | None = None, name: str = ""):
        self.data = data if isinstance(data, np.ndarray) and data.dtype == DTYPE else np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad = grad
        if requires_grad and grad is None:
            self.grad = np.zeros_like(self.data)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._on_reached: Callable[[], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{', ' + self.name if self.name else ''})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, k: float) -> "Tensor":
        return scale(self, k)

    __rmul__ = __mul__

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if self._backward is None:
            raise UsageError("backward() called on a tensor with no recorded forward graph")
        if self.data.size != 1:
            raise UsageError(f"backward() needs a scalar output, got shape {self.shape}")
        order = _topological(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data, dtype=np.float64)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad += g.astype(DTYPE, copy=False)
                    if node._on_reached is not None:
                        node._on_reached()
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topological(root: Tensor) -> list[Tensor]:
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def _make(data: np.ndarray, parents: Iterable[Tensor], backward) -> Tensor:
    if CHECK_FINITE and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite values in forward pass")
    parents = tuple(parents)
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ------------------------------------------------------------------ elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise StructuralError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def add_n(xs: Sequence[Tensor]) -> Tensor:
    if len(xs) == 1:
        return xs[0]
    shape = xs[0].shape
    if any(x.shape != shape for x in xs):
        raise StructuralError("add_n: shape mismatch")
    data = xs[0].data.copy()
    for x in xs[1:]:
        data += x.data
    return _make(data, xs, lambda g: [g] * len(xs))


def scale(x: Tensor, k: float) -> Tensor:
    return _make(x.data * DTYPE(k), (x,), lambda g: (g * k,))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _make(np.where(pos, x.data, DTYPE(0)), (x,), lambda g: (g * pos,))


def sample_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize each sample over all its C x H x W entries (no learned scale or shift)."""
    axes = tuple(range(1, x.data.ndim))
    mu = x.data.mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(x.data.var(axis=axes, keepdims=True) + eps)
    y = ((x.data - mu) * inv).astype(DTYPE)

    def backward(g):
        gm = g.mean(axis=axes, keepdims=True)
        gy = (g * y).mean(axis=axes, keepdims=True)
        return ((g - gm - y * gy) * inv,)

    return _make(y, (x,), backward)


def zeros(shape: tuple[int, ...]) -> Tensor:
    return Tensor(np.zeros(shape, dtype=DTYPE))


def weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar ``sum(x * weights)`` computed in float64 (used by gradient checks)."""
    w = np.asarray(weights, dtype=np.float64)
    out = _make(np.array(0.0), (x,), lambda g: (g * w,))
    out.data = np.array(np.sum(x.data.astype(np.float64) * w))
    return out


# ------------------------------------------------------------------ convolution

def _pad(x: np.ndarray, pad: int, value: float = 0.0) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=value)


def _out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _windows(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """(N, C, Ho, Wo, k, k) strided view."""
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0,
           groups: int = 1) -> Tensor:
    """Cross-correlation with weight shape ``(C_out, C_in // groups, k, k)``.

    Only dense (``groups == 1``) and depthwise (``groups == C_in == C_out``)
    layouts are supported.
    """
    n, c, h, wd = x.shape
    co, ci_g, kh, kw = w.shape
    if kh != kw:
        raise StructuralError("square kernels only")
    k = kh
    if groups == 1:
        if ci_g != c:
            raise StructuralError(f"conv2d: input has {c} channels, kernel expects {ci_g}")
    elif not (groups == c == co and ci_g == 1):
        raise StructuralError(f"conv2d: unsupported groups={groups} for {c}->{co}")
    ho, wo = _out_size(h, k, stride, padding), _out_size(wd, k, stride, padding)
    if ho < 1 or wo < 1:
        raise StructuralError(f"conv2d: input {h}x{wd} too small for kernel {k}")
    xp = _pad(x.data, padding)
    win = _windows(xp, k, stride, ho, wo)

    if groups == 1:
        cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(c * k * k, n * ho * wo)
        w2 = w.data.reshape(co, -1)
        out = (w2 @ cols).reshape(co, n, ho, wo).transpose(1, 0, 2, 3)
    else:
        cols = None
        out = np.zeros((n, c, ho, wo), dtype=DTYPE)
        for i in range(k):
            for j in range(k):
                out += xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] * \
                    w.data[None, :, 0, i, j, None, None]
    if b is not None:
        out = out + b.data[None, :, None, None]
    out = np.ascontiguousarray(out, dtype=DTYPE)

    def backward(g):
        g = g.astype(DTYPE, copy=False)
        gx = gw = gb = None
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if groups == 1:
            g2 = g.transpose(1, 0, 2, 3).reshape(co, -1)
            if w.requires_grad:
                gw = (g2 @ cols.T).reshape(w.shape)
            if x.requires_grad:
                dcols = (w2.T @ g2).reshape(c, k, k, n, ho, wo)
                dxp = np.zeros_like(xp)
                for i in range(k):
                    for j in range(k):
                        dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += \
                            dcols[:, i, j].transpose(1, 0, 2, 3)
                gx = dxp[:, :, padding : padding + h, padding : padding + wd] if padding else dxp
        else:
            if w.requires_grad:
                gw = np.empty(w.shape, dtype=DTYPE)
                for i in range(k):
                    for j in range(k):
                        patch = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
                        gw[:, 0, i, j] = np.einsum("nchw,nchw->c", patch, g)
            if x.requires_grad:
                dxp = np.zeros_like(xp)
                for i in range(k):
                    for j in range(k):
                        dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += \
                            g * w.data[None, :, 0, i, j, None, None]
                gx = dxp[:, :, padding : padding + h, padding : padding + wd] if padding else dxp
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, backward)


# ------------------------------------------------------------------ pooling

def max_pool2d(x: Tensor, k: int = 3, stride: int = 1, padding: int = 1) -> Tensor:
    n, c, h, wd = x.shape
    ho, wo = _out_size(h, k, stride, padding), _out_size(wd, k, stride, padding)
    xp = _pad(x.data, padding, value=-np.inf)
    win = _windows(xp, k, stride, ho, wo).reshape(n, c, ho, wo, k * k)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0].astype(DTYPE)

    def backward(g):
        dxp = np.zeros(xp.shape, dtype=DTYPE)
        for i in range(k):
            for j in range(k):
                sel = idx == i * k + j
                dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += g * sel
        return (dxp[:, :, padding : padding + h, padding : padding + wd],)

    return _make(out, (x,), backward)


def avg_pool2d(x: Tensor, k: int = 3, stride: int = 1, padding: int = 1) -> Tensor:
    """Average pooling that excludes padded cells from the divisor."""
    n, c, h, wd = x.shape
    ho, wo = _out_size(h, k, stride, padding), _out_size(wd, k, stride, padding)
    xp = _pad(x.data, padding)
    ones = _pad(np.ones((1, 1, h, wd), dtype=DTYPE), padding)
    counts = _windows(ones, k, stride, ho, wo).sum(axis=(-1, -2))  # (1,1,ho,wo)
    out = (_windows(xp, k, stride, ho, wo).sum(axis=(-1, -2)) / counts).astype(DTYPE)

    def backward(g):
        gs = g / counts
        dxp = np.zeros(xp.shape, dtype=np.float64)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gs
        return (dxp[:, :, padding : padding + h, padding : padding + wd],)

    return _make(out, (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), dtype=np.float64).astype(DTYPE)
    return _make(out, (x,), lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape),))


# ------------------------------------------------------------------ reshaping

def subsample(x: Tensor, offset: int = 0, stride: int = 2) -> Tensor:
    """``x[:, :, offset::stride, offset::stride]`` zero-padded to ``ceil(H / stride)``."""
    n, c, h, w = x.shape
    ho, wo = -(-h // stride), -(-w // stride)
    out = np.zeros((n, c, ho, wo), dtype=DTYPE)
    part = x.data[:, :, offset::stride, offset::stride]
    out[:, :, : part.shape[2], : part.shape[3]] = part

    def backward(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[:, :, offset::stride, offset::stride] = g[:, :, : part.shape[2], : part.shape[3]]
        return (gx,)

    return _make(out, (x,), backward)


def channel_slice(x: Tensor, start: int, stop: int) -> Tensor:
    def backward(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[:, start:stop] = g
        return (gx,)

    return _make(x.data[:, start:stop].copy(), (x,), backward)


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    sizes = [t.shape[axis] for t in xs]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in xs], axis=axis)

    def backward(g):
        sl = [slice(None)] * g.ndim
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl[axis] = slice(lo, hi)
            parts.append(g[tuple(sl)])
        return parts

    return _make(out, xs, backward)


def factorized_reduce(x: Tensor) -> Tensor:
    """Parameter-free stride-2 reduce: half the channels sampled at offset 0, half at offset 1."""
    c = x.shape[1]
    if c == 1:
        return subsample(x, 0)
    half = c // 2
    a = subsample(channel_slice(x, 0, half), 0)
    b = subsample(channel_slice(x, half, c), 1)
    return concat([a, b], axis=1)


# ------------------------------------------------------------------ dense + loss

def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T + b`` with ``w`` of shape ``(out, in)``."""
    if x.shape[1] != w.shape[1]:
        raise StructuralError(f"linear: input width {x.shape[1]} != weight width {w.shape[1]}")
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data

    def backward(g):
        g = g.astype(DTYPE, copy=False)
        gx = g @ w.data if x.requires_grad else None
        gw = g.T @ x.data if w.requires_grad else None
        gb = g.sum(axis=0) if b is not None and b.requires_grad else None
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _make(out.astype(DTYPE), parents, backward)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> tuple[Tensor, int]:
    """Mean softmax cross-entropy and the number of argmax hits."""
    targets = np.asarray(targets)
    n, k = logits.shape
    if targets.shape != (n,):
        raise StructuralError(f"targets shape {targets.shape}, expected ({n},)")
    if targets.size and (targets.min() < 0 or targets.max() >= k):
        raise DataError(f"label outside [0, {k})")
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    logp_t = z[np.arange(n), targets] - lse
    loss = -logp_t.mean()
    correct = int((logits.data.argmax(axis=1) == targets).sum())

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(n), targets] -= 1.0
        return (g * p / n,)

    out = _make(np.array(0.0), (logits,), backward)
    out.data = np.array(loss)
    return out, correct
