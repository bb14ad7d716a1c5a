"""Reverse-mode automatic differentiation over numpy arrays.

A ``GradTensor`` wraps an ndarray plus a closure that knows how to push
gradients to its parents; ``backward`` runs the closures in reverse
topological order.  Only the operations needed by the separation models are
implemented, and every shape coercion is an explicit op: two-operand
arithmetic requires identical shapes and dtypes, broadcasting never happens
silently.

The module also hosts the Adam optimizer, a finite-difference gradient
checker, and a small checkpoint format (text header + little-endian float32
payload).
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

_FINITE_CHECKS = False


def set_finite_checks(enabled):
    """Toggle per-op NaN/Inf assertions (slow; meant for debugging runs)."""
    global _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)


class GradTensor:
    """An ndarray node in a dynamically built computation graph."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, value, requires_grad=False, parents=(), backward=None):
        self.value = np.asarray(value)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = parents
        self._backward = backward
        if _FINITE_CHECKS and not np.all(np.isfinite(self.value)):
            raise FloatingPointError("non-finite values in graph node")

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def item(self):
        return float(self.value)

    def detach(self):
        return GradTensor(self.value, requires_grad=False)

    def __repr__(self):
        return f"GradTensor(shape={self.value.shape}, dtype={self.value.dtype}, requires_grad={self.requires_grad})"

    # -- operator sugar (scalar operands only; tensor-tensor goes through ops) --

    def __add__(self, other):
        if isinstance(other, GradTensor):
            return add(self, other)
        return add_scalar(self, float(other))

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, GradTensor):
            return mul(self, other)
        return mul_scalar(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __sub__(self, other):
        if isinstance(other, GradTensor):
            return sub(self, other)
        return add_scalar(self, -float(other))

    def __rsub__(self, other):
        return add_scalar(mul_scalar(self, -1.0), float(other))

    def __truediv__(self, other):
        return mul_scalar(self, 1.0 / float(other))

    def __getitem__(self, key):
        return narrow(self, key)

    def backward(self):
        backward(self)


def tensor(value, requires_grad=False, dtype=None):
    """Wrap an array-like as a graph node (a leaf)."""
    arr = np.asarray(value)
    if dtype is not None:
        arr = arr.astype(dtype)
    return GradTensor(arr, requires_grad=requires_grad)


def param(value, dtype=np.float32):
    """Wrap an array as a trainable leaf."""
    return GradTensor(np.asarray(value, dtype=dtype), requires_grad=True)


def constant(value, dtype=None):
    return tensor(value, requires_grad=False, dtype=dtype)


def _wants_grad(*tensors):
    return any(t.requires_grad for t in tensors)


def _node(value, parents, backward_fn):
    """Build an interior node; prunes the closure when no parent needs grads."""
    if _FINITE_CHECKS and not np.all(np.isfinite(value)):
        raise FloatingPointError("non-finite values in graph node")
    if not _wants_grad(*parents):
        return GradTensor(value, requires_grad=False)
    return GradTensor(value, requires_grad=True, parents=tuple(parents), backward=backward_fn)


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.value.dtype, copy=True)
    else:
        t.grad += g


def _check_same(a, b, op):
    if a.value.shape != b.value.shape:
        raise ValueError(f"{op}: shape mismatch {a.value.shape} vs {b.value.shape}")
    if a.value.dtype != b.value.dtype:
        raise ValueError(f"{op}: dtype mismatch {a.value.dtype} vs {b.value.dtype}")


def backward(root):
    """Backpropagate from a scalar root, then release interior gradients.

    After the call every leaf with ``requires_grad`` holds its gradient;
    interior nodes have their gradients freed so large graphs do not pin
    memory between steps.
    """
    if root.value.size != 1:
        raise ValueError(f"backward requires a scalar root, got shape {root.value.shape}")

    topo = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))

    root.grad = np.ones_like(root.value)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
        if node._parents:
            node.grad = None  # interior node: release


# ---------------------------------------------------------------------------
# elementwise and scalar ops
# ---------------------------------------------------------------------------


def add(a, b):
    _check_same(a, b, "add")

    def bwd(g):
        _accum(a, g)
        _accum(b, g)

    return _node(a.value + b.value, (a, b), bwd)


def sub(a, b):
    _check_same(a, b, "sub")

    def bwd(g):
        _accum(a, g)
        _accum(b, -g)

    return _node(a.value - b.value, (a, b), bwd)


def mul(a, b):
    _check_same(a, b, "mul")

    def bwd(g):
        _accum(a, g * b.value)
        _accum(b, g * a.value)

    return _node(a.value * b.value, (a, b), bwd)


def add_scalar(a, s):
    def bwd(g):
        _accum(a, g)

    return _node(a.value + s, (a,), bwd)


def mul_scalar(a, s):
    def bwd(g):
        _accum(a, g * s)

    return _node(a.value * s, (a,), bwd)


def exp(a):
    out = np.exp(a.value)

    def bwd(g):
        _accum(a, g * out)

    return _node(out, (a,), bwd)


def log(a):
    def bwd(g):
        _accum(a, g / a.value)

    return _node(np.log(a.value), (a,), bwd)


def sqrt(a):
    out = np.sqrt(a.value)

    def bwd(g):
        _accum(a, g * (0.5 / out))

    return _node(out, (a,), bwd)


def tanh(a):
    out = np.tanh(a.value)

    def bwd(g):
        _accum(a, g * (1.0 - out * out))

    return _node(out, (a,), bwd)


def sigmoid(a):
    # stable both tails
    x = a.value
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = out.astype(x.dtype, copy=False)

    def bwd(g):
        _accum(a, g * out * (1.0 - out))

    return _node(out, (a,), bwd)


def leaky_relu(a, slope=0.2):
    x = a.value
    out = np.where(x > 0, x, slope * x)

    def bwd(g):
        _accum(a, g * np.where(x > 0, 1.0, slope).astype(x.dtype))

    return _node(out, (a,), bwd)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a):
    """tanh-approximation GeLU."""
    x = a.value
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bwd(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        dt = (1.0 - t * t) * dinner
        _accum(a, g * (0.5 * (1.0 + t) + 0.5 * x * dt))

    return _node(out, (a,), bwd)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------


def sum_(a, axis=None, keepdims=False):
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.value.shape))
            return
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axis)
        _accum(a, np.broadcast_to(gg, a.value.shape))

    return _node(out, (a,), bwd)


def mean(a, axis=None, keepdims=False):
    if axis is None:
        n = a.value.size
    else:
        n = a.value.shape[axis]
    return mul_scalar(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape):
    def bwd(g):
        _accum(a, g.reshape(a.value.shape))

    return _node(a.value.reshape(shape), (a,), bwd)


def transpose(a, axes):
    inv = np.argsort(axes)

    def bwd(g):
        _accum(a, g.transpose(inv))

    return _node(a.value.transpose(axes), (a,), bwd)


def concat(tensors, axis=0):
    if not tensors:
        raise ValueError("concat of empty list")
    sizes = [t.value.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(t, g[tuple(sl)])

    return _node(np.concatenate([t.value for t in tensors], axis=axis), tuple(tensors), bwd)


def narrow(a, key):
    """Basic slicing; gradient scatters back into a zero array."""
    out = a.value[key]

    def bwd(g):
        full = np.zeros_like(a.value)
        full[key] = g
        _accum(a, full)

    return _node(out, (a,), bwd)


def take_rows(table, ids):
    """Row gather (embedding lookup). ``ids`` is an integer ndarray."""
    ids = np.asarray(ids)
    out = table.value[ids]

    def bwd(g):
        gt = np.zeros_like(table.value)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.value.shape[-1]))
        _accum(table, gt)

    return _node(out, (table,), bwd)


def take_diag(a):
    """Main diagonal of a square matrix as a vector."""
    if a.value.ndim != 2 or a.value.shape[0] != a.value.shape[1]:
        raise ValueError(f"take_diag expects a square matrix, got {a.value.shape}")
    n = a.value.shape[0]
    idx = np.arange(n)

    def bwd(g):
        full = np.zeros_like(a.value)
        full[idx, idx] = g
        _accum(a, full)

    return _node(a.value[idx, idx].copy(), (a,), bwd)


def bias_add(x, b, axis=-1):
    """Explicit broadcast: add a 1-D bias along one axis of ``x``."""
    if b.value.ndim != 1 or b.value.shape[0] != x.value.shape[axis]:
        raise ValueError(f"bias_add: bias {b.value.shape} does not fit axis {axis} of {x.value.shape}")
    shape = [1] * x.value.ndim
    shape[axis] = b.value.shape[0]
    sum_axes = tuple(i for i in range(x.value.ndim) if i != axis % x.value.ndim)

    def bwd(g):
        _accum(x, g)
        _accum(b, g.sum(axis=sum_axes))

    return _node(x.value + b.value.reshape(shape), (x, b), bwd)


def scale_by_vector(x, v, axis=-1):
    """Explicit broadcast: multiply by a 1-D vector along one axis."""
    if v.value.ndim != 1 or v.value.shape[0] != x.value.shape[axis]:
        raise ValueError(f"scale_by_vector: vector {v.value.shape} does not fit axis {axis} of {x.value.shape}")
    shape = [1] * x.value.ndim
    shape[axis] = v.value.shape[0]
    sum_axes = tuple(i for i in range(x.value.ndim) if i != axis % x.value.ndim)
    vr = v.value.reshape(shape)

    def bwd(g):
        _accum(x, g * vr)
        _accum(v, (g * x.value).sum(axis=sum_axes))

    return _node(x.value * vr, (x, v), bwd)


# ---------------------------------------------------------------------------
# softmax / normalization layers
# ---------------------------------------------------------------------------


def softmax(a, axis=-1):
    x = a.value
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        _accum(a, out * (g - dot))

    return _node(out, (a,), bwd)


def l2_normalize(a, axis=-1, eps=1e-8):
    """Rows scaled to unit Euclidean norm (fused, with a stable backward)."""
    x = a.value
    n = np.sqrt((x * x).sum(axis=axis, keepdims=True) + eps)
    out = x / n

    def bwd(g):
        dot = (g * x).sum(axis=axis, keepdims=True)
        _accum(a, g / n - x * (dot / (n**3)))

    return _node(out, (a,), bwd)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize over the last axis, then affine per-feature."""
    d = x.value.shape[-1]
    if gamma.value.shape != (d,) or beta.value.shape != (d,):
        raise ValueError("layer_norm: gamma/beta must be 1-D of the feature size")
    mu = x.value.mean(axis=-1, keepdims=True)
    xc = x.value - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bwd(g):
        lead = tuple(range(g.ndim - 1))
        _accum(gamma, (g * xhat).sum(axis=lead))
        _accum(beta, g.sum(axis=lead))
        gx = g * gamma.value
        m1 = gx.mean(axis=-1, keepdims=True)
        m2 = (gx * xhat).mean(axis=-1, keepdims=True)
        _accum(x, inv * (gx - m1 - xhat * m2))

    return _node(xhat * gamma.value + beta.value, (x, gamma, beta), bwd)


@dataclass
class BatchNormState:
    """Running statistics updated in training mode, read in eval mode."""

    running_mean: np.ndarray
    running_var: np.ndarray

    @classmethod
    def create(cls, channels, dtype=np.float32):
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batch_norm(x, gamma, beta, state, training, momentum=0.1, eps=1e-5):
    """Channel batch norm for NCHW tensors.

    In training mode the batch statistics normalize and the running
    statistics in ``state`` are updated in place (unbiased variance, like the
    convention the pretrained-checkpoint world expects); in eval mode only
    the stored statistics are used.
    """
    if x.value.ndim != 4:
        raise ValueError(f"batch_norm expects NCHW, got shape {x.value.shape}")
    c = x.value.shape[1]
    if gamma.value.shape != (c,) or beta.value.shape != (c,):
        raise ValueError("batch_norm: gamma/beta must be 1-D of the channel size")
    axes = (0, 2, 3)
    shape = (1, c, 1, 1)

    if training:
        mu = x.value.mean(axis=axes)
        xc = x.value - mu.reshape(shape)
        var = (xc * xc).mean(axis=axes)
        n = x.value.size // c
        state.running_mean += momentum * (mu - state.running_mean)
        unbiased = var * (n / max(n - 1, 1))
        state.running_var += momentum * (unbiased - state.running_var)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv.reshape(shape)

        def bwd(g):
            _accum(gamma, (g * xhat).sum(axis=axes))
            _accum(beta, g.sum(axis=axes))
            gx = g * gamma.value.reshape(shape)
            m1 = gx.mean(axis=axes).reshape(shape)
            m2 = (gx * xhat).mean(axis=axes).reshape(shape)
            _accum(x, inv.reshape(shape) * (gx - m1 - xhat * m2))

        return _node(xhat * gamma.value.reshape(shape) + beta.value.reshape(shape), (x, gamma, beta), bwd)

    inv = (1.0 / np.sqrt(state.running_var + eps)).astype(x.value.dtype)
    out = (x.value - state.running_mean.reshape(shape)) * inv.reshape(shape)

    def bwd_eval(g):
        _accum(gamma, (g * out).sum(axis=axes))
        _accum(beta, g.sum(axis=axes))
        _accum(x, g * (gamma.value * inv).reshape(shape))

    return _node(out * gamma.value.reshape(shape) + beta.value.reshape(shape), (x, gamma, beta), bwd_eval)


# ---------------------------------------------------------------------------
# matmul / conv / resampling
# ---------------------------------------------------------------------------


def matmul(a, b):
    """Matrix product.  ``a`` may carry leading batch axes; ``b`` is either
    2-D (shared across the batch) or has the same leading axes as ``a``."""
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")
    if bv.ndim != 2 and av.shape[:-2] != bv.shape[:-2]:
        raise ValueError(f"matmul: incompatible batch shapes {av.shape} vs {bv.shape}")
    if av.shape[-1] != bv.shape[-2]:
        raise ValueError(f"matmul: inner dims differ {av.shape} vs {bv.shape}")

    out = av @ bv

    def bwd(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(bv, -1, -2)
            _accum(a, ga)
        if b.requires_grad:
            gb = np.swapaxes(av, -1, -2) @ g
            if bv.ndim == 2 and gb.ndim > 2:
                gb = gb.reshape(-1, *gb.shape[-2:]).sum(axis=0)
            _accum(b, gb)

    return _node(out, (a, b), bwd)


def linear(x, w, b=None):
    out = matmul(x, w)
    if b is not None:
        out = bias_add(out, b, axis=-1)
    return out


def _im2col(xp, kh, kw, stride):
    bsz, c, h, w = xp.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    v = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    v = v[:, :, ::stride, ::stride, :, :]
    cols = np.ascontiguousarray(v.transpose(0, 2, 3, 1, 4, 5)).reshape(bsz * oh * ow, c * kh * kw)
    return cols, oh, ow


def _pad_nchw(x, padding):
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def conv2d(x, w, b=None, stride=1, padding=0):
    """2-D convolution (cross-correlation) on NCHW input.

    ``w`` is [out_ch, in_ch, kh, kw]; ``b`` is a 1-D bias over out channels.
    Forward and backward both lower onto matrix products.
    """
    if x.value.ndim != 4 or w.value.ndim != 4:
        raise ValueError(f"conv2d expects NCHW input and OIHW weight, got {x.value.shape} and {w.value.shape}")
    if x.value.shape[1] != w.value.shape[1]:
        raise ValueError(f"conv2d: channel mismatch {x.value.shape} vs {w.value.shape}")
    bsz, cin, h, wd = x.value.shape
    cout, _, kh, kw = w.value.shape
    xp = _pad_nchw(x.value, padding)
    if xp.shape[2] < kh or xp.shape[3] < kw:
        raise ValueError("conv2d: kernel larger than padded input")
    cols, oh, ow = _im2col(xp, kh, kw, stride)
    wmat = w.value.reshape(cout, -1)
    out = (cols @ wmat.T).reshape(bsz, oh, ow, cout).transpose(0, 3, 1, 2)

    def bwd(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, cout)
        if w.requires_grad:
            # cols are recomputed so the graph does not pin the im2col buffer
            cols2, _, _ = _im2col(_pad_nchw(x.value, padding), kh, kw, stride)
            _accum(w, (gmat.T @ cols2).reshape(w.value.shape))
        if x.requires_grad:
            gcols = gmat @ wmat
            g6 = gcols.reshape(bsz, oh, ow, cin, kh, kw).transpose(0, 3, 1, 2, 4, 5)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += g6[:, :, :, :, i, j]
            if padding:
                gxp = gxp[:, :, padding:-padding, padding:-padding]
            _accum(x, gxp)

    out_node = _node(out, (x, w), bwd)
    if b is not None:
        out_node = bias_add(out_node, b, axis=1)
    return out_node


def _shift_clamped(x, axis, direction):
    # y[i] = x[i+direction] with indices clamped to the valid range
    n = x.shape[axis]
    sl = [slice(None)] * x.ndim
    edge = [slice(None)] * x.ndim
    if direction > 0:
        sl[axis] = slice(1, n)
        edge[axis] = slice(n - 1, n)
        return np.concatenate([x[tuple(sl)], x[tuple(edge)]], axis=axis)
    sl[axis] = slice(0, n - 1)
    edge[axis] = slice(0, 1)
    return np.concatenate([x[tuple(edge)], x[tuple(sl)]], axis=axis)


def _shift_clamped_adjoint(g, axis, direction):
    n = g.shape[axis]
    out = np.zeros_like(g)
    src = [slice(None)] * g.ndim
    dst = [slice(None)] * g.ndim
    edge_src = [slice(None)] * g.ndim
    edge_dst = [slice(None)] * g.ndim
    if direction > 0:
        # forward read x[min(i+1, n-1)]
        src[axis] = slice(0, n - 1)
        dst[axis] = slice(1, n)
        edge_src[axis] = slice(n - 1, n)
        edge_dst[axis] = slice(n - 1, n)
    else:
        # forward read x[max(i-1, 0)]
        src[axis] = slice(1, n)
        dst[axis] = slice(0, n - 1)
        edge_src[axis] = slice(0, 1)
        edge_dst[axis] = slice(0, 1)
    out[tuple(dst)] = g[tuple(src)]
    out[tuple(edge_dst)] += g[tuple(edge_src)]
    return out


def _up2_axis_fwd(x, axis):
    even = 0.75 * x + 0.25 * _shift_clamped(x, axis, -1)
    odd = 0.75 * x + 0.25 * _shift_clamped(x, axis, +1)
    shape = list(x.shape)
    shape[axis] *= 2
    out = np.empty(shape, dtype=x.dtype)
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(0, None, 2)
    out[tuple(sl)] = even
    sl[axis] = slice(1, None, 2)
    out[tuple(sl)] = odd
    return out


def _up2_axis_adj(g, axis):
    sl = [slice(None)] * g.ndim
    sl[axis] = slice(0, None, 2)
    ge = g[tuple(sl)]
    sl[axis] = slice(1, None, 2)
    go = g[tuple(sl)]
    return 0.75 * (ge + go) + 0.25 * _shift_clamped_adjoint(ge, axis, -1) + 0.25 * _shift_clamped_adjoint(go, axis, +1)


def bilinear_upsample2x(x):
    """Doubles the two trailing spatial axes of an NCHW tensor.

    Half-pixel-center bilinear interpolation with clamped edges; the backward
    pass is the exact adjoint of the forward (interpolate rows then columns).
    """
    if x.value.ndim != 4:
        raise ValueError(f"bilinear_upsample2x expects NCHW, got {x.value.shape}")
    out = _up2_axis_fwd(_up2_axis_fwd(x.value, 2), 3)

    def bwd(g):
        _accum(x, _up2_axis_adj(_up2_axis_adj(g, 3), 2))

    return _node(out, (x,), bwd)


def scaled_dot_attention(q, k, v, n_heads, key_mask=None):
    """Multi-head scaled dot-product attention.

    ``q`` is [B, Tq, C] and ``k``/``v`` are [B, Tk, C] with C divisible by
    ``n_heads``; ``key_mask`` is an optional boolean ndarray [B, Tk] marking
    valid key positions.  Composed from the graph primitives so no extra
    backward rule is needed.
    """
    bsz, tq, c = q.value.shape
    _, tk, ck = k.value.shape
    if ck != c or v.value.shape != k.value.shape:
        raise ValueError("scaled_dot_attention: q/k/v feature sizes must agree")
    if c % n_heads:
        raise ValueError(f"scaled_dot_attention: {c} channels not divisible by {n_heads} heads")
    hd = c // n_heads

    def split(t, tlen):
        return transpose(reshape(t, (bsz, tlen, n_heads, hd)), (0, 2, 1, 3))

    qh = split(q, tq)  # [B, h, Tq, hd]
    kh = split(k, tk)
    vh = split(v, tk)
    scores = mul_scalar(matmul(qh, transpose(kh, (0, 1, 3, 2))), 1.0 / math.sqrt(hd))
    if key_mask is not None:
        key_mask = np.asarray(key_mask, dtype=bool)
        if key_mask.shape != (bsz, tk):
            raise ValueError(f"key_mask shape {key_mask.shape} != {(bsz, tk)}")
        bias = np.where(key_mask, 0.0, -1e9).astype(scores.value.dtype)
        bias = np.broadcast_to(bias[:, None, None, :], scores.value.shape)
        scores = add(scores, constant(bias.copy()))
    attn = softmax(scores, axis=-1)
    ctx = matmul(attn, vh)  # [B, h, Tq, hd]
    return reshape(transpose(ctx, (0, 2, 1, 3)), (bsz, tq, c))


def expand_scalar(a, shape):
    """Explicit broadcast of a scalar node to ``shape`` (gradient sums back)."""
    if a.value.size != 1:
        raise ValueError(f"expand_scalar needs a scalar, got shape {a.value.shape}")

    def bwd(g):
        _accum(a, np.asarray(g.sum()).reshape(a.value.shape))

    return _node(np.broadcast_to(a.value.reshape(()), shape).copy(), (a,), bwd)


def l1_diff(a, b):
    """Mean absolute difference (scalar); the l1 norm used by the losses."""
    _check_same(a, b, "l1_diff")
    d = a.value - b.value
    n = d.size

    def bwd(g):
        s = (g / n) * np.sign(d)
        _accum(a, s)
        _accum(b, -s)

    return _node(np.abs(d).mean(), (a, b), bwd)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """First/second moment accumulators, keyed by parameter position."""

    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    t: int = 0


def adam_step(params, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update over ``params``; gradients are consumed (reset to None).

    Raises if any parameter arrives without a gradient so a miswired graph
    fails loudly instead of silently freezing a tensor.
    """
    if not state.m:
        state.m = [np.zeros_like(p.value) for p in params]
        state.v = [np.zeros_like(p.value) for p in params]
    if len(state.m) != len(params):
        raise ValueError("AdamState does not match the parameter list")
    state.t += 1
    b1t = 1.0 - beta1**state.t
    b2t = 1.0 - beta2**state.t
    for i, p in enumerate(params):
        if p.grad is None:
            raise ValueError(f"adam_step: parameter {i} has no gradient")
        g = p.grad
        state.m[i] += (1.0 - beta1) * (g - state.m[i])
        state.v[i] += (1.0 - beta2) * (g * g - state.v[i])
        mhat = state.m[i] / b1t
        vhat = state.v[i] / b2t
        p.value -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.value.dtype, copy=False)
        p.grad = None


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def grad_check(build_loss, named_params, h=1e-6, max_entries=None, seed=0):
    """Compare analytic gradients with central finite differences.

    ``build_loss`` rebuilds the graph from the current parameter values and
    returns the scalar loss node.  Returns ``{name: max relative error}``;
    the relative error uses ``|a - d| / max(|a|, |d|, 0.01)`` so tiny
    gradients are compared absolutely at the 1e-2 scale.
    """
    for _, p in named_params:
        p.grad = None  # stale gradients would silently accumulate
    loss = build_loss()
    backward(loss)
    analytic = {}
    for name, p in named_params:
        if p.grad is None:
            raise ValueError(f"grad_check: no gradient for {name}")
        analytic[name] = p.grad.copy()
        p.grad = None

    rng = np.random.default_rng(seed)
    report = {}
    for name, p in named_params:
        flat = p.value.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        worst = 0.0
        for i in idx:
            keep = flat[i]
            flat[i] = keep + h
            hi = float(build_loss().value)
            flat[i] = keep - h
            lo = float(build_loss().value)
            flat[i] = keep
            fd = (hi - lo) / (2.0 * h)
            an = float(analytic[name].reshape(-1)[i])
            err = abs(an - fd) / max(abs(an), abs(fd), 1e-2)
            worst = max(worst, err)
        report[name] = worst
        p.grad = None
    return report


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_CKPT_MAGIC = "WKSEP-CKPT v1"


def save_checkpoint(path, named_arrays):
    """Write ``(name, array)`` pairs: text header, then float32 LE payload."""
    items = list(named_arrays)
    lines = [_CKPT_MAGIC, str(len(items))]
    blobs = []
    for name, arr in items:
        if any(ch.isspace() for ch in name):
            raise ValueError(f"checkpoint names cannot contain whitespace: {name!r}")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        lines.append(" ".join([name] + [str(d) for d in arr.shape]))
        blobs.append(arr.tobytes())
    header = ("\n".join(lines) + "\nDATA\n").encode("utf-8")
    with open(path, "wb") as f:
        f.write(header)
        for b in blobs:
            f.write(b)


def load_checkpoint(path):
    """Read a checkpoint back as an ordered ``{name: float32 array}`` map."""
    with open(path, "rb") as f:
        raw = f.read()
    marker = b"\nDATA\n"
    split = raw.find(marker)
    if split < 0:
        raise ValueError(f"{path}: not a checkpoint (missing DATA marker)")
    head = raw[:split].decode("utf-8").splitlines()
    if not head or head[0] != _CKPT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic")
    count = int(head[1])
    entries = head[2:]
    if len(entries) != count:
        raise ValueError(f"{path}: header lists {len(entries)} tensors, expected {count}")
    out = OrderedDict()
    offset = split + len(marker)
    for line in entries:
        parts = line.split()
        name, shape = parts[0], tuple(int(d) for d in parts[1:])
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=offset).reshape(shape)
        offset += 4 * n
        out[name] = arr.copy()
    if offset != len(raw):
        raise ValueError(f"{path}: payload size mismatch")
    return out
