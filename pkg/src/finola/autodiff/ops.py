"""Differentiable operations on :class:`~finola.autodiff.tape.Var`.

Image tensors are channels-last: (batch, height, width, channels).
"""
from __future__ import annotations

import numpy as np

from .tape import Var, as_var

_GELU_C = np.sqrt(2.0 / np.pi)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _wrap(value, parents, fn, op):
    out = Var(value, parents, op=op)
    if out.requires_grad:
        out.backward_fn = fn
    return out


# -- elementwise ---------------------------------------------------------------


def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    sa, sb = a.shape, b.shape
    return _wrap(a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    sa, sb = a.shape, b.shape
    return _wrap(a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value
    return _wrap(av * bv, (a, b), lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)), "mul")


def gelu(x) -> Var:
    """tanh-approximated GELU."""
    x = as_var(x)
    v = x.value
    inner = _GELU_C * (v + 0.044715 * v * v * v)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def fn(g):
        d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * v * v)
        return (g * d,)

    return _wrap(out, (x,), fn, "gelu")


# -- shape plumbing --------------------------------------------------------------


def reshape(x, shape) -> Var:
    x = as_var(x)
    old = x.shape
    return _wrap(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x, axes) -> Var:
    x = as_var(x)
    inv = np.argsort(axes)
    return _wrap(np.transpose(x.value, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(x, idx) -> Var:
    x = as_var(x)
    shape = x.shape

    def fn(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _wrap(x.value[idx], (x,), fn, "getitem")


def stack(xs, axis=0) -> Var:
    xs = [as_var(x) for x in xs]

    def fn(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(xs)))

    return _wrap(np.stack([x.value for x in xs], axis=axis), xs, fn, "stack")


def concat(xs, axis=0) -> Var:
    xs = [as_var(x) for x in xs]
    cuts = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _wrap(np.concatenate([x.value for x in xs], axis=axis), xs, lambda g: tuple(np.split(g, cuts, axis=axis)), "concat")


def broadcast_to(x, shape) -> Var:
    x = as_var(x)
    old = x.shape
    return _wrap(np.broadcast_to(x.value, shape).copy(), (x,), lambda g: (_unbroadcast(g, old),), "broadcast_to")


def gather_rows(x, idx) -> Var:
    """``out[b, m] = x[b, idx[b, m]]`` for x of shape (B, N, C) and idx (B, M)."""
    x = as_var(x)
    idx = np.asarray(idx)
    shape = x.shape
    b = np.arange(shape[0])[:, None]

    def fn(g):
        out = np.zeros(shape)
        np.add.at(out, (b, idx), g)
        return (out,)

    return _wrap(x.value[b, idx], (x,), fn, "gather_rows")


def sum(x, axis=None) -> Var:  # noqa: A001
    x = as_var(x)
    shape = x.shape

    def fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _wrap(x.value.sum(axis=axis), (x,), fn, "sum")


def mean(x, axis=None) -> Var:
    x = as_var(x)
    n = x.value.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis), 1.0 / n)


# -- linear algebra ----------------------------------------------------------------


def matmul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2:
        raise ValueError(f"matmul needs >=2-d operands, got {av.shape} and {bv.shape}")
    if av.shape[-1] != bv.shape[-2]:
        raise ValueError(f"matmul shape mismatch {av.shape} @ {bv.shape}")

    def fn(g):
        ga = g @ np.swapaxes(bv, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(av, -1, -2) @ g if b.requires_grad else None
        return (None if ga is None else _unbroadcast(ga, av.shape), None if gb is None else _unbroadcast(gb, bv.shape))

    return _wrap(av @ bv, (a, b), fn, "matmul")


def linear(x, w, b=None) -> Var:
    y = matmul(x, w)
    return y if b is None else add(y, b)


# -- normalization and attention ---------------------------------------------------


def position_normalize(x, eps: float = 1e-6) -> Var:
    """Normalize every position across the last (channel) axis.

    Matches :func:`finola.core.normalize`: population std, ``eps`` added to it.
    """
    x = as_var(x)
    v = x.value
    c = v.shape[-1]
    d = v - v.mean(axis=-1, keepdims=True)
    s = np.sqrt(np.mean(d * d, axis=-1, keepdims=True))
    t = s + eps
    out = d / t

    def fn(g):
        safe = np.where(s > 0, s, 1.0)
        gd = g / t - d * np.sum(g * d, axis=-1, keepdims=True) / (c * safe * t * t)
        return (gd - gd.mean(axis=-1, keepdims=True),)

    return _wrap(out, (x,), fn, "position_normalize")


def _softmax(v, axis=-1):
    e = np.exp(v - v.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x, axis=-1) -> Var:
    x = as_var(x)
    y = _softmax(x.value, axis)
    return _wrap(y, (x,), lambda g: (y * (g - np.sum(g * y, axis=axis, keepdims=True)),), "softmax")


def single_head_attention(q, k, v) -> Var:
    """``softmax(q k^T / sqrt(d)) v`` over (B, Nq, d), (B, Nk, d), (B, Nk, dv)."""
    q, k, v = as_var(q), as_var(k), as_var(v)
    qv, kv, vv = q.value, k.value, v.value
    if qv.shape[-1] != kv.shape[-1] or kv.shape[-2] != vv.shape[-2]:
        raise ValueError(f"attention shape mismatch q{qv.shape} k{kv.shape} v{vv.shape}")
    scale = 1.0 / np.sqrt(qv.shape[-1])
    p = _softmax(qv @ np.swapaxes(kv, -1, -2) * scale)
    out = p @ vv

    def fn(g):
        gp = g @ np.swapaxes(vv, -1, -2)
        gv = np.swapaxes(p, -1, -2) @ g
        gs = p * (gp - np.sum(gp * p, axis=-1, keepdims=True)) * scale
        gq = gs @ kv
        gk = np.swapaxes(gs, -1, -2) @ qv
        return (_unbroadcast(gq, qv.shape), _unbroadcast(gk, kv.shape), _unbroadcast(gv, vv.shape))

    return _wrap(out, (q, k, v), fn, "single_head_attention")


# -- convolution and resampling ----------------------------------------------------


def conv3x3(x, w, b=None, stride: int = 1) -> Var:
    """3x3 convolution with zero padding 1 on (B, H, W, Cin); ``w`` is (3, 3, Cin, Cout)."""
    if stride not in (1, 2):
        raise ValueError("stride must be 1 or 2")
    x, w = as_var(x), as_var(w)
    xv, wv = x.value, w.value
    if xv.ndim != 4 or wv.shape[:3] != (3, 3, xv.shape[-1]):
        raise ValueError(f"conv3x3 shape mismatch: input {xv.shape}, kernel {wv.shape}")
    bsz, h, wd, cin = xv.shape
    cout = wv.shape[-1]
    ho, wo = (h - 1) // stride + 1, (wd - 1) // stride + 1
    xp = np.pad(xv, ((0, 0), (1, 1), (1, 1), (0, 0)))
    taps = [(ky, kx) for ky in range(3) for kx in range(3)]
    sl = [(slice(ky, ky + stride * (ho - 1) + 1, stride), slice(kx, kx + stride * (wo - 1) + 1, stride)) for ky, kx in taps]
    cols = np.concatenate([xp[:, sy, sx, :] for sy, sx in sl], axis=-1)  # (B, ho, wo, 9*cin)
    wmat = wv.reshape(9 * cin, cout)
    out = cols @ wmat

    def fn(g):
        gw = None
        if w.requires_grad:
            gw = (cols.reshape(-1, 9 * cin).T @ g.reshape(-1, cout)).reshape(wv.shape)
        gx = None
        if x.requires_grad:
            gcols = g @ wmat.T
            gxp = np.zeros_like(xp)
            for t, (sy, sx) in enumerate(sl):
                gxp[:, sy, sx, :] += gcols[..., t * cin:(t + 1) * cin]
            gx = gxp[:, 1:-1, 1:-1, :]
        return gx, gw

    y = _wrap(out, (x, w), fn, "conv3x3")
    return y if b is None else add(y, b)


def upsample_nearest(x) -> Var:
    """Nearest-neighbour x2 upsampling of (B, H, W, C)."""
    x = as_var(x)
    bsz, h, w, c = x.shape
    out = np.repeat(np.repeat(x.value, 2, axis=1), 2, axis=2)
    return _wrap(out, (x,), lambda g: (g.reshape(bsz, h, 2, w, 2, c).sum(axis=(2, 4)),), "upsample_nearest")


# -- losses -------------------------------------------------------------------------


def mse(pred, target, pixel_mask=None) -> Var:
    """Mean squared error, optionally restricted to ``pixel_mask``.

    ``pixel_mask`` broadcasts against ``pred`` without its channel axis, e.g.
    (B, H, W) or (H, W) for (B, H, W, C) images. The mean runs over selected
    pixels and all channels.
    """
    pred = as_var(pred)
    target = np.asarray(target.value if isinstance(target, Var) else target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"mse shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.value - target
    if pixel_mask is None:
        weight = np.ones(pred.shape)
    else:
        weight = np.broadcast_to(np.asarray(pixel_mask, dtype=np.float64)[..., None], pred.shape)
    count = weight.sum()
    if count == 0:
        raise ValueError("pixel mask selects no pixels")
    val = np.sum(weight * diff * diff) / count
    return _wrap(np.asarray(val), (pred,), lambda g: (g * 2.0 * weight * diff / count,), "mse")
