"""Low-level neural-net primitives with explicit forward/backward passes.

Everything here is plain numpy and pure: each forward returns (output, cache)
and the matching backward consumes the cache.  Convolutions are stride-1
cross-correlations with optional dilation; pooling supports overlapping
windows (stride < size) and caps windows that run past the end of the axis.
"""

from __future__ import annotations

import numpy as np

# -----------------------------------------------------------------------
# initialization
# -----------------------------------------------------------------------


def he_uniform(shape, fan_in, rng):
    """He-style uniform init: U(-limit, limit) with limit = sqrt(6 / fan_in)."""
    limit = np.sqrt(6.0 / max(1, fan_in))
    return rng.uniform(-limit, limit, size=shape)


# -----------------------------------------------------------------------
# activations
# -----------------------------------------------------------------------


def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(dout, mask):
    return dout * mask


def softmax(x, axis=-1):
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(x, axis=-1):
    shifted = x - np.max(x, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


# -----------------------------------------------------------------------
# 2-D convolution (stride 1, optional dilation, same/valid padding)
# -----------------------------------------------------------------------


def _same_padding(kernel_extent):
    left = (kernel_extent - 1) // 2
    return left, kernel_extent - 1 - left


def conv2d(x, w, b, padding="same", dilation=(1, 1)):
    """Cross-correlate x (T, F, Cin) with w (kt, kf, Cin, Cout), add bias.

    Returns (out, cache).  'same' keeps spatial extent, 'valid' shrinks by
    (k - 1) * dilation per axis and requires the input to be large enough.
    """
    kt, kf, cin, cout = w.shape
    dt, df = dilation
    et = (kt - 1) * dt + 1
    ef = (kf - 1) * df + 1
    if x.shape[2] != cin:
        raise ValueError(f"channel mismatch: input {x.shape[2]}, kernel {cin}")
    if padding == "same":
        pt0, pt1 = _same_padding(et)
        pf0, pf1 = _same_padding(ef)
        xp = np.pad(x, ((pt0, pt1), (pf0, pf1), (0, 0)))
        crop = (pt0, pf0)
    elif padding == "valid":
        if x.shape[0] < et or x.shape[1] < ef:
            raise ValueError(
                f"input {x.shape[:2]} smaller than effective kernel ({et}, {ef})"
            )
        xp = x
        crop = (0, 0)
    else:
        raise ValueError(f"unknown padding {padding!r}")
    ot = xp.shape[0] - et + 1
    of = xp.shape[1] - ef + 1
    acc = np.zeros((ot * of, cout))
    for i in range(kt):
        for j in range(kf):
            xs = xp[i * dt : i * dt + ot, j * df : j * df + of, :]
            acc += xs.reshape(-1, cin) @ w[i, j]
    out = acc.reshape(ot, of, cout) + b
    cache = (xp, w, crop, x.shape, dilation)
    return out, cache


def conv2d_backward(dout, cache):
    """Gradients of conv2d: returns (dx, dw, db)."""
    xp, w, crop, x_shape, dilation = cache
    kt, kf, cin, cout = w.shape
    dt, df = dilation
    ot, of, _ = dout.shape
    g = dout.reshape(-1, cout)
    dw = np.zeros_like(w)
    dxp = np.zeros_like(xp)
    for i in range(kt):
        for j in range(kf):
            xs = xp[i * dt : i * dt + ot, j * df : j * df + of, :]
            dw[i, j] = xs.reshape(-1, cin).T @ g
            dxp[i * dt : i * dt + ot, j * df : j * df + of, :] += (
                g @ w[i, j].T
            ).reshape(ot, of, cin)
    db = g.sum(axis=0)
    pt0, pf0 = crop
    dx = dxp[pt0 : pt0 + x_shape[0], pf0 : pf0 + x_shape[1], :]
    return dx, dw, db


# -----------------------------------------------------------------------
# pooling
# -----------------------------------------------------------------------
# 1-D pooling along one axis; 2-D pooling is the composition time-then-freq
# (exactly equivalent for max, and for mean because window capping is
# independent per axis).  Windows start at multiples of the stride and are
# capped at the end of the axis, so the output extent is ceil(n / stride).


def _pool1d_windows(n, size, stride):
    starts = np.arange(0, n, stride)
    ends = np.minimum(starts + size, n)
    return starts, ends


def pool1d(x, size, stride, axis, kind):
    """Pool x along `axis`. Returns (out, cache). kind is 'max' or 'mean'."""
    if size == 1 and stride == 1:
        return x, None
    xm = np.moveaxis(x, axis, 0)
    lead = xm.shape[0]
    rest = xm.shape[1:]
    flat = xm.reshape(lead, -1)
    starts, ends = _pool1d_windows(lead, size, stride)
    n_out = len(starts)
    if kind == "max":
        out = np.empty((n_out, flat.shape[1]))
        argmax = np.empty((n_out, flat.shape[1]), dtype=np.intp)
        full = np.flatnonzero(ends - starts == size)
        if full.size:
            view = np.lib.stride_tricks.sliding_window_view(flat, size, axis=0)
            sel = view[starts[full]]  # (n_full, cols, size)
            out[full] = sel.max(axis=2)
            argmax[full] = starts[full][:, None] + sel.argmax(axis=2)
        for m in np.flatnonzero(ends - starts != size):
            seg = flat[starts[m] : ends[m]]
            out[m] = seg.max(axis=0)
            argmax[m] = starts[m] + seg.argmax(axis=0)
        cache = ("max", x.shape, axis, lead, argmax)
    elif kind == "mean":
        csum = np.vstack([np.zeros((1, flat.shape[1])), np.cumsum(flat, axis=0)])
        counts = (ends - starts).astype(float)
        out = (csum[ends] - csum[starts]) / counts[:, None]
        cache = ("mean", x.shape, axis, lead, (starts, ends, counts))
    else:
        raise ValueError(f"unknown pooling kind {kind!r}")
    out = out.reshape((n_out,) + rest)
    return np.moveaxis(out, 0, axis), cache


def pool1d_backward(dout, cache):
    if cache is None:
        return dout
    kind, x_shape, axis, lead, extra = cache
    dm = np.moveaxis(dout, axis, 0)
    n_out = dm.shape[0]
    g = dm.reshape(n_out, -1)
    dflat = np.zeros((lead, g.shape[1]))
    cols = np.arange(g.shape[1])
    if kind == "max":
        argmax = extra
        np.add.at(dflat, (argmax, cols[None, :]), g)
    else:
        starts, ends, counts = extra
        for m in range(n_out):
            dflat[starts[m] : ends[m]] += g[m] / counts[m]
    rest = tuple(x_shape[:axis]) + tuple(x_shape[axis + 1 :])
    dxm = dflat.reshape((lead,) + rest)
    return np.moveaxis(dxm, 0, axis)


def pool2d(x, size, stride, kind):
    """Pool (T, F, C) over time then frequency with capped windows."""
    out_t, cache_t = pool1d(x, size[0], stride[0], axis=0, kind=kind)
    out, cache_f = pool1d(out_t, size[1], stride[1], axis=1, kind=kind)
    return out, (cache_t, cache_f)


def pool2d_backward(dout, cache):
    cache_t, cache_f = cache
    d = pool1d_backward(dout, cache_f)
    return pool1d_backward(d, cache_t)


def pooled_extent(n, size, stride):
    """Output extent of capped pooling: ceil(n / stride) (identity if size 1)."""
    if size == 1 and stride == 1:
        return n
    return -(-n // stride)


# -----------------------------------------------------------------------
# dropout (inverted scaling at train time)
# -----------------------------------------------------------------------


def dropout(x, rate, rng):
    if rate <= 0.0:
        return x, None
    keep = rng.random(x.shape) >= rate
    scale = 1.0 / (1.0 - rate)
    return x * keep * scale, (keep, scale)


def dropout_backward(dout, cache):
    if cache is None:
        return dout
    keep, scale = cache
    return dout * keep * scale


# -----------------------------------------------------------------------
# dense layer on a single vector
# -----------------------------------------------------------------------


def dense(x, w, b):
    return x @ w + b, (x, w)


def dense_backward(dout, cache):
    x, w = cache
    dw = np.outer(x, dout)
    db = dout
    dx = w @ dout
    return dx, dw, db


# -----------------------------------------------------------------------
# gated temporal attention
# -----------------------------------------------------------------------
# scores   s_t = v . tanh(W x_t + b)        (W: C x A, v: A)
# weights  alpha = softmax(s)
# gate     g_t = sigmoid(U x_t + c)         (U: C x C)
# output   sum_t alpha_t * (g_t * x_t)


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def attention(x, w, b, v, u, c):
    """Gated temporal attention over x (T, C). Returns ((C,) vector, cache)."""
    th = np.tanh(x @ w + b)  # (T, A)
    s = th @ v  # (T,)
    alpha = softmax(s)
    g = sigmoid(x @ u.T + c)  # (T, C)
    h = g * x
    out = alpha @ h
    return out, (x, w, v, u, th, alpha, g, h)


def attention_backward(dout, cache):
    x, w, v, u, th, alpha, g, h = cache
    dh = alpha[:, None] * dout[None, :]  # (T, C)
    dalpha = h @ dout  # (T,)
    ds = alpha * (dalpha - np.dot(alpha, dalpha))
    dv = th.T @ ds
    dth = np.outer(ds, v)
    dpre = dth * (1.0 - th * th)  # (T, A)
    dw = x.T @ dpre
    db = dpre.sum(axis=0)
    dg = dh * x
    dzg = dg * g * (1.0 - g)
    du = dzg.T @ x
    dc = dzg.sum(axis=0)
    dx = dh * g + dpre @ w.T + dzg @ u
    return dx, {"w": dw, "b": db, "v": dv, "u": du, "c": dc}


# -----------------------------------------------------------------------
# L2 normalization
# -----------------------------------------------------------------------


def l2_normalize(x):
    norm = max(float(np.linalg.norm(x)), 1e-12)
    y = x / norm
    return y, (y, norm)


def l2_normalize_backward(dout, cache):
    y, norm = cache
    return (dout - y * np.dot(y, dout)) / norm
