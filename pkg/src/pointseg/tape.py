"""Minimal reverse-mode automatic differentiation over dense numpy tensors.

Each operation records its parents and a backward closure; ``backward`` on a
scalar root walks the graph in reverse topological order accumulating
gradients.  Works in f32 (training) or f64 (gradient checks); ops preserve
the input dtype.  Tensors are at most 5-axis (batch, channel, x, y, z).
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from .errors import NumericError, ValidationError


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    # make ndarray <op> Tensor defer to our reflected operators instead of
    # broadcasting the Tensor as an object scalar
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, parents=(), backward=None):
        self.data = np.asarray(data)
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in parents)
        self.grad = None
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other, self.dtype))

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return mul(self, _as_tensor(-1.0, self.dtype))


def tensor(data, requires_grad=False, dtype=None):
    a = np.asarray(data)
    if dtype is not None:
        a = a.astype(dtype)
    return Tensor(a, requires_grad=requires_grad)


def _as_tensor(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _accum(parent, g):
    if not parent.requires_grad:
        return
    if parent.grad is None:
        parent.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
    else:
        parent.grad = parent.grad + g


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to the parent shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(root):
    """Reverse-accumulate gradients from a scalar root."""
    if root.data.size != 1:
        raise ValidationError("backward requires a scalar root")
    topo = []
    seen = {id(root)}
    stack = [(root, iter(root._parents))]
    while stack:
        node, it = stack[-1]
        advanced = False
        for p in it:
            if id(p) in seen or not p.requires_grad:
                continue
            seen.add(id(p))
            stack.append((p, iter(p._parents)))
            advanced = True
            break
        if not advanced:
            topo.append(node)
            stack.pop()
    root.grad = np.ones_like(root.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# elementwise and arithmetic primitives


def add(a, b):
    out = Tensor(a.data + b.data, parents=(a, b))

    def bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    out._backward = bw
    return out


def sub(a, b):
    out = Tensor(a.data - b.data, parents=(a, b))

    def bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    out._backward = bw
    return out


def mul(a, b):
    out = Tensor(a.data * b.data, parents=(a, b))

    def bw(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    out._backward = bw
    return out


def div(a, b):
    out = Tensor(a.data / b.data, parents=(a, b))

    def bw(g):
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    out._backward = bw
    return out


def log(a):
    out = Tensor(np.log(a.data), parents=(a,))

    def bw(g):
        _accum(a, g / a.data)

    out._backward = bw
    return out


def square(a):
    out = Tensor(a.data * a.data, parents=(a,))

    def bw(g):
        _accum(a, 2.0 * g * a.data)

    out._backward = bw
    return out


def relu(a):
    out = Tensor(np.maximum(a.data, 0), parents=(a,))
    mask = a.data > 0

    def bw(g):
        _accum(a, g * mask)

    out._backward = bw
    return out


def sigmoid(a):
    s = expit(a.data)
    out = Tensor(s, parents=(a,))

    def bw(g):
        _accum(a, g * s * (1.0 - s))

    out._backward = bw
    return out


def clamp(a, lo, hi):
    """Clip values; gradient passes through wherever the value was kept."""
    out = Tensor(np.clip(a.data, lo, hi), parents=(a,))
    mask = (a.data >= lo) & (a.data <= hi)

    def bw(g):
        _accum(a, g * mask)

    out._backward = bw
    return out


def stop_gradient(a):
    return Tensor(a.data.copy(), parents=())


def sum_all(a):
    out = Tensor(np.asarray(a.data.sum(), dtype=a.dtype), parents=(a,))

    def bw(g):
        _accum(a, np.broadcast_to(g, a.data.shape).astype(a.dtype))

    out._backward = bw
    return out


def mean_all(a):
    n = a.data.size
    out = Tensor(np.asarray(a.data.mean(), dtype=a.dtype), parents=(a,))

    def bw(g):
        _accum(a, np.broadcast_to(g / n, a.data.shape).astype(a.dtype))

    out._backward = bw
    return out


def softmax_channels(a):
    """Stable softmax along axis 1 (channels)."""
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    out = Tensor(p, parents=(a,))

    def bw(g):
        dot = (g * p).sum(axis=1, keepdims=True)
        _accum(a, p * (g - dot))

    out._backward = bw
    return out


def take_channel(a, idx):
    """Select one channel (axis 1), keeping the channel axis with size 1."""
    out = Tensor(a.data[:, idx:idx + 1], parents=(a,))

    def bw(g):
        full = np.zeros_like(a.data)
        full[:, idx:idx + 1] = g
        _accum(a, full)

    out._backward = bw
    return out


def reshape(a, shape):
    out = Tensor(a.data.reshape(shape), parents=(a,))

    def bw(g):
        _accum(a, g.reshape(a.data.shape))

    out._backward = bw
    return out


def concat(tensors, axis=1):
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis), parents=tuple(tensors))
    sizes = [t.data.shape[axis] for t in tensors]

    def bw(g):
        start = 0
        for t, s in zip(tensors, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(start, start + s)
            _accum(t, g[tuple(sl)])
            start += s

    out._backward = bw
    return out


def custom(value, parents, backward_fn):
    """Wrap an externally computed value with a hand-written backward.

    backward_fn(upstream) must return one gradient array per parent.
    """
    out = Tensor(np.asarray(value), parents=tuple(parents))

    def bw(g):
        grads = backward_fn(g)
        for p, gp in zip(parents, grads):
            if gp is not None:
                _accum(p, gp)

    out._backward = bw
    return out


# ---------------------------------------------------------------------------
# structured primitives


def _conv_out_size(n, k, s, p):
    return (n + 2 * p - k) // s + 1


def conv3d(x, w, b=None, stride=1):
    """3D convolution, zero padding k//2 (same-size output at stride 1).

    x: (N, Cin, X, Y, Z); w: (Cout, Cin, k, k, k) with odd cubic k; b: (Cout,).
    Implemented as im2col + gemm; the column matrix is kept for backward.
    """
    N, Cin, X, Y, Z = x.data.shape
    Cout, Cw, kx, ky, kz = w.data.shape
    if Cw != Cin:
        raise ValidationError(f"conv3d channel mismatch: input {Cin}, weight {Cw}")
    if not (kx == ky == kz) or kx % 2 == 0:
        raise ValidationError("conv3d requires odd cubic kernels")
    k, s = kx, int(stride)
    p = k // 2
    OX, OY, OZ = (_conv_out_size(n, k, s, p) for n in (X, Y, Z))
    if p > 0:
        xp = np.zeros((N, Cin, X + 2 * p, Y + 2 * p, Z + 2 * p), dtype=x.data.dtype)
        xp[:, :, p:p + X, p:p + Y, p:p + Z] = x.data
    else:
        xp = x.data
    col = np.empty((N, Cin, k, k, k, OX, OY, OZ), dtype=x.data.dtype)
    for i in range(k):
        for j in range(k):
            for l in range(k):
                col[:, :, i, j, l] = xp[:, :, i:i + s * OX:s, j:j + s * OY:s, l:l + s * OZ:s]
    col2 = col.reshape(N, Cin * k * k * k, OX * OY * OZ)
    wmat = w.data.reshape(Cout, Cin * k * k * k)
    out_data = np.empty((N, Cout, OX, OY, OZ), dtype=x.data.dtype)
    for n in range(N):
        y = wmat @ col2[n]
        out_data[n] = y.reshape(Cout, OX, OY, OZ)
    if b is not None:
        out_data += b.data.reshape(1, Cout, 1, 1, 1)
    parents = (x, w) if b is None else (x, w, b)
    out = Tensor(out_data, parents=parents)

    def bw(g):
        gmat = g.reshape(N, Cout, OX * OY * OZ)
        dw = np.zeros_like(w.data.reshape(Cout, -1))
        need_dx = x.requires_grad
        dxp = np.zeros_like(xp) if need_dx else None
        for n in range(N):
            dw += gmat[n] @ col2[n].T
            if need_dx:
                dcol = (wmat.T @ gmat[n]).reshape(Cin, k, k, k, OX, OY, OZ)
                for i in range(k):
                    for j in range(k):
                        for l in range(k):
                            dxp[n, :, i:i + s * OX:s, j:j + s * OY:s, l:l + s * OZ:s] += dcol[:, i, j, l]
        _accum(w, dw.reshape(w.data.shape))
        if need_dx:
            if p > 0:
                _accum(x, dxp[:, :, p:p + X, p:p + Y, p:p + Z])
            else:
                _accum(x, dxp)
        if b is not None:
            _accum(b, g.sum(axis=(0, 2, 3, 4)))

    out._backward = bw
    return out


def nearest_upsample(x, factor=2):
    """Nearest-neighbor upsampling of the three spatial axes."""
    f = int(factor)
    d = x.data
    up = d.repeat(f, axis=2).repeat(f, axis=3).repeat(f, axis=4)
    out = Tensor(up, parents=(x,))
    N, C, X, Y, Z = d.shape

    def bw(g):
        blocks = g.reshape(N, C, X, f, Y, f, Z, f)
        _accum(x, blocks.sum(axis=(3, 5, 7)))

    out._backward = bw
    return out


# ---------------------------------------------------------------------------
# verification helpers


def finite_diff_scalar(f, arrays, eps=1e-3):
    """Central finite-difference gradients of scalar f w.r.t. each array."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a, dtype=np.float64)
        for idx in np.ndindex(a.shape):
            keep = a[idx]
            a[idx] = keep + eps
            hi = f()
            a[idx] = keep - eps
            lo = f()
            a[idx] = keep
            g[idx] = (hi - lo) / (2 * eps)
        grads.append(g)
    return grads


def max_rel_error(analytic, numeric, floor=1e-8):
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.abs(n), floor)
    scale = max(np.abs(n).max(), floor)
    # relative to the gradient's overall scale, elementwise floor guards zeros
    return float((np.abs(a - n) / np.maximum(denom, 1e-2 * scale)).max())


def check_finite(arr, what="array"):
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values in {what}")
