"""Differentiable operations.

Every op validates shapes up front (raising ValueError with the op name and
offending shapes), computes the forward result in numpy, and records a
backward rule on the active tape when one of its inputs can carry gradient.
With no active tape an op is a plain numpy evaluation.
"""

import numpy as np

from .tensor import Tensor, active_tape

LAYERNORM_EPS = 1e-5


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x):
    """A tensor that never requires grad (convenience for literals)."""
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=False)


def _record(out, inputs, backward_fn):
    tape = active_tape()
    if tape is not None and any(tape.tracks(t) for t in inputs):
        tape.record(out, inputs, backward_fn)
    return out


def _unbroadcast(g, shape):
    # Sum gradient down to the broadcast source shape.
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(name, a, b):
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ValueError(f"{name}: shapes {a.data.shape} and {b.data.shape} do not broadcast")


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    out = Tensor(a.data + b.data)
    def bw(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)
    return _record(out, (a, b), bw)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    out = Tensor(a.data - b.data)
    def bw(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)
    return _record(out, (a, b), bw)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    out = Tensor(a.data * b.data)
    def bw(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))
    return _record(out, (a, b), bw)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    out = Tensor(a.data / b.data)
    def bw(g):
        return (_unbroadcast(g / b.data, a.data.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))
    return _record(out, (a, b), bw)


def scale(a, c):
    a = as_tensor(a)
    c = float(c)
    out = Tensor(a.data * c)
    def bw(g):
        return (g * c,)
    return _record(out, (a,), bw)


def neg(a):
    return scale(a, -1.0)


def exp(a):
    a = as_tensor(a)
    out = Tensor(np.exp(a.data))
    def bw(g):
        return (g * out.data,)
    return _record(out, (a,), bw)


def log(a):
    a = as_tensor(a)
    out = Tensor(np.log(a.data))
    def bw(g):
        return (g / a.data,)
    return _record(out, (a,), bw)


def relu(a):
    a = as_tensor(a)
    out = Tensor(np.maximum(a.data, 0.0))
    def bw(g):
        return (g * (a.data > 0.0),)
    return _record(out, (a,), bw)


def maximum(a, b):
    """Elementwise max; ties route gradient to the first argument."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("maximum", a, b)
    out = Tensor(np.maximum(a.data, b.data))
    def bw(g):
        pick_a = a.data >= b.data
        return (_unbroadcast(g * pick_a, a.data.shape),
                _unbroadcast(g * ~pick_a, b.data.shape))
    return _record(out, (a, b), bw)


def absolute(a):
    a = as_tensor(a)
    out = Tensor(np.abs(a.data))
    def bw(g):
        return (g * np.sign(a.data),)
    return _record(out, (a,), bw)


def sigmoid(a):
    a = as_tensor(a)
    # Stable two-sided form, exp argument always <= 0.
    x = a.data
    y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                 np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = Tensor(y)
    def bw(g):
        return (g * out.data * (1.0 - out.data),)
    return _record(out, (a,), bw)


def pow_const(a, exponent):
    """a ** exponent for a fixed float exponent; domain a > 0 unless integer."""
    a = as_tensor(a)
    p = float(exponent)
    out = Tensor(a.data ** p)
    def bw(g):
        return (g * p * a.data ** (p - 1.0),)
    return _record(out, (a,), bw)


# ---------------------------------------------------------------------------
# linear algebra and shape plumbing

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.data.shape} @ {b.data.shape}")
    out = Tensor(a.data @ b.data)
    def bw(g):
        return g @ b.data.T, a.data.T @ g
    return _record(out, (a, b), bw)


def reshape(a, shape):
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape))
    def bw(g):
        return (g.reshape(a.data.shape),)
    return _record(out, (a,), bw)


def transpose(a, axes):
    a = as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = Tensor(a.data.transpose(axes))
    def bw(g):
        return (g.transpose(inverse),)
    return _record(out, (a,), bw)


def concat(tensors, axis):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat: empty tensor list")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    def bw(g):
        return tuple(np.split(g, splits, axis=axis))
    return _record(out, tuple(tensors), bw)


def take(a, indices):
    """Gather rows along axis 0 by an integer index array."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    out = Tensor(a.data[idx])
    def bw(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)
    return _record(out, (a,), bw)


def reduce_sum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))
    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape).copy(),)
    return _record(out, (a,), bw)


def reduce_mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        count = a.data.size
    elif isinstance(axis, tuple):
        count = int(np.prod([a.data.shape[ax] for ax in axis]))
    else:
        count = a.data.shape[axis]
    summed = reduce_sum(a, axis=axis, keepdims=keepdims)
    return scale(summed, 1.0 / count)


# ---------------------------------------------------------------------------
# normalizations

def softmax(a, axis=-1):
    """Softmax along `axis`; rows sum to 1 and shifting logits is a no-op."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)
    def bw(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)
    return _record(out, (a,), bw)


def layernorm(a, eps=LAYERNORM_EPS):
    """Normalize the last axis to zero mean, unit variance (plus eps).

    A constant vector maps to exact zeros; affine gain/bias live outside as
    ordinary mul/add so this op stays parameter free.
    """
    a = as_tensor(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = Tensor(xhat)
    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)
    return _record(out, (a,), bw)


# ---------------------------------------------------------------------------
# convolutions and pooling (stride 1, odd kernels, zero padding keeps size)

def _pad2d(x, ph, pw):
    c, h, w = x.shape
    xp = np.zeros((c, h + 2 * ph, w + 2 * pw), dtype=x.dtype)
    xp[:, ph:ph + h, pw:pw + w] = x
    return xp


def conv2d(x, w, bias=None):
    """2D convolution: x (C_in,H,W), w (C_out,C_in,kh,kw), same padding."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 3 or w.data.ndim != 4 or x.data.shape[0] != w.data.shape[1]:
        raise ValueError(f"conv2d: shapes {x.data.shape} and {w.data.shape} incompatible")
    c_out, c_in, kh, kw = w.data.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d: kernel must be odd, got {(kh, kw)}")
    _, h, wd = x.data.shape
    ph, pw = kh // 2, kw // 2
    xp = _pad2d(x.data, ph, pw)
    out_data = np.zeros((c_out, h, wd))
    for di in range(kh):
        for dj in range(kw):
            patch = xp[:, di:di + h, dj:dj + wd].reshape(c_in, -1)
            out_data += (w.data[:, :, di, dj] @ patch).reshape(c_out, h, wd)
    inputs = [x, w]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.data.shape != (c_out,):
            raise ValueError(f"conv2d: bias shape {bias.data.shape} != ({c_out},)")
        out_data += bias.data[:, None, None]
        inputs.append(bias)
    out = Tensor(out_data)

    def bw(g):
        gflat = g.reshape(c_out, -1)
        gw = np.zeros_like(w.data)
        gxp = np.zeros_like(xp)
        for di in range(kh):
            for dj in range(kw):
                patch = xp[:, di:di + h, dj:dj + wd].reshape(c_in, -1)
                gw[:, :, di, dj] = gflat @ patch.T
                gxp[:, di:di + h, dj:dj + wd] += (w.data[:, :, di, dj].T @ gflat).reshape(c_in, h, wd)
        gx = gxp[:, ph:ph + h, pw:pw + wd]
        if bias is not None:
            return gx, gw, g.sum(axis=(1, 2))
        return gx, gw
    return _record(out, tuple(inputs), bw)


def depthwise_conv2d(x, w, bias=None):
    """Per-channel 2D convolution: x (C,H,W), w (C,kh,kw), same padding."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 3 or w.data.ndim != 3 or x.data.shape[0] != w.data.shape[0]:
        raise ValueError(f"depthwise_conv2d: shapes {x.data.shape} and {w.data.shape} incompatible")
    c, h, wd = x.data.shape
    _, kh, kw = w.data.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"depthwise_conv2d: kernel must be odd, got {(kh, kw)}")
    ph, pw = kh // 2, kw // 2
    xp = _pad2d(x.data, ph, pw)
    out_data = np.zeros((c, h, wd))
    for di in range(kh):
        for dj in range(kw):
            out_data += w.data[:, di, dj][:, None, None] * xp[:, di:di + h, dj:dj + wd]
    inputs = [x, w]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.data.shape != (c,):
            raise ValueError(f"depthwise_conv2d: bias shape {bias.data.shape} != ({c},)")
        out_data += bias.data[:, None, None]
        inputs.append(bias)
    out = Tensor(out_data)

    def bw(g):
        gw = np.zeros_like(w.data)
        gxp = np.zeros_like(xp)
        for di in range(kh):
            for dj in range(kw):
                patch = xp[:, di:di + h, dj:dj + wd]
                gw[:, di, dj] = (g * patch).sum(axis=(1, 2))
                gxp[:, di:di + h, dj:dj + wd] += w.data[:, di, dj][:, None, None] * g
        gx = gxp[:, ph:ph + h, pw:pw + wd]
        if bias is not None:
            return gx, gw, g.sum(axis=(1, 2))
        return gx, gw
    return _record(out, tuple(inputs), bw)


def _pool_bounds(n_in, n_out):
    starts = (np.arange(n_out) * n_in) // n_out
    ends = -((-(np.arange(n_out) + 1) * n_in) // n_out)  # ceil division
    return starts, ends


def adaptive_avg_pool2d(x, out_hw):
    """Average pool x (C,H,W) onto an (out_h, out_w) grid of mean regions."""
    x = as_tensor(x)
    if x.data.ndim != 3:
        raise ValueError(f"adaptive_avg_pool2d: expected (C,H,W), got {x.data.shape}")
    c, h, w = x.data.shape
    oh, ow = out_hw
    rs, re = _pool_bounds(h, oh)
    cs, ce = _pool_bounds(w, ow)
    out_data = np.zeros((c, oh, ow))
    for i in range(oh):
        for j in range(ow):
            out_data[:, i, j] = x.data[:, rs[i]:re[i], cs[j]:ce[j]].mean(axis=(1, 2))
    out = Tensor(out_data)

    def bw(g):
        gx = np.zeros_like(x.data)
        for i in range(oh):
            for j in range(ow):
                area = (re[i] - rs[i]) * (ce[j] - cs[j])
                gx[:, rs[i]:re[i], cs[j]:ce[j]] += g[:, i, j][:, None, None] / area
        return (gx,)
    return _record(out, (x,), bw)


# ---------------------------------------------------------------------------
# norms

def l1_norm(a):
    a = as_tensor(a)
    out = Tensor(np.abs(a.data).sum())
    def bw(g):
        return (g * np.sign(a.data),)
    return _record(out, (a,), bw)


def l2_norm(a):
    a = as_tensor(a)
    value = float(np.sqrt((a.data * a.data).sum()))
    out = Tensor(value)
    def bw(g):
        if value == 0.0:
            return (np.zeros_like(a.data),)  # subgradient at the origin
        return (g * a.data / value,)
    return _record(out, (a,), bw)


# ---------------------------------------------------------------------------
# compositions used throughout the models

def linear(x, weight, bias=None):
    """x (N,D_in) @ weight (D_in,D_out) + bias, the everyday affine map."""
    out = matmul(x, weight)
    if bias is not None:
        out = add(out, bias)
    return out


def ffn(x, w1, b1, w2, b2):
    """Two-layer ReLU feed-forward block."""
    return linear(relu(linear(x, w1, b1)), w2, b2)


def layernorm_affine(x, gain, bias):
    return add(mul(layernorm(x), gain), bias)


def straight_through(hard_values, soft):
    """Forward takes `hard_values` (ndarray), gradient flows through `soft`."""
    offset = constant(np.asarray(hard_values, dtype=np.float64) - soft.data)
    return add(offset, soft)
