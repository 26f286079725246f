"""Raw float64 array operations for the conv-net stack.

Everything is batched NCHW.  Convolution, the only hot loop, has a numba
kernel and an im2col/matmul numpy fallback; the remaining ops are cheap
elementwise numpy.  All forward functions are pure; backward functions
consume exactly what their forward returned in the cache tuple.
"""

import numpy as np

from falconseg.backend import numba_available, use_numba


# ------------------------------------------------------------------ conv2d

def _conv_shapes(x, w, stride, pad):
    n, c, h, wd = x.shape
    co, ci, kh, kw = w.shape
    if c != ci:
        raise ValueError(f"conv channel mismatch: input {c}, weight expects {ci}")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ValueError(f"conv output would be empty for input {x.shape}, kernel {w.shape}")
    return ho, wo


def _pad(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _im2col(xp, kh, kw, stride, ho, wo):
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=np.float64)
    for ki in range(kh):
        for kj in range(kw):
            cols[:, :, ki, kj] = xp[
                :, :, ki : ki + ho * stride : stride, kj : kj + wo * stride : stride
            ]
    return cols.reshape(n, c * kh * kw, ho * wo)


if numba_available():
    from numba import njit

    @njit(cache=True)
    def _conv_fwd_nb(xp, w, b, stride, ho, wo):
        n, c, hp, wp = xp.shape
        co, ci, kh, kw = w.shape
        y = np.empty((n, co, ho, wo), dtype=np.float64)
        for ni in range(n):
            for o in range(co):
                for i in range(ho):
                    for j in range(wo):
                        acc = b[o]
                        for cc in range(c):
                            for ki in range(kh):
                                for kj in range(kw):
                                    acc += (
                                        xp[ni, cc, i * stride + ki, j * stride + kj]
                                        * w[o, cc, ki, kj]
                                    )
                        y[ni, o, i, j] = acc
        return y

    @njit(cache=True)
    def _conv_bwd_nb(dy, xp, w, stride):
        n, c, hp, wp = xp.shape
        co, ci, kh, kw = w.shape
        ho, wo = dy.shape[2], dy.shape[3]
        dxp = np.zeros_like(xp)
        dw = np.zeros_like(w)
        db = np.zeros(co, dtype=np.float64)
        for ni in range(n):
            for o in range(co):
                for i in range(ho):
                    for j in range(wo):
                        g = dy[ni, o, i, j]
                        db[o] += g
                        for cc in range(c):
                            for ki in range(kh):
                                for kj in range(kw):
                                    dxp[ni, cc, i * stride + ki, j * stride + kj] += (
                                        g * w[o, cc, ki, kj]
                                    )
                                    dw[o, cc, ki, kj] += (
                                        g * xp[ni, cc, i * stride + ki, j * stride + kj]
                                    )
        return dxp, dw, db

else:  # pragma: no cover
    _conv_fwd_nb = None
    _conv_bwd_nb = None


def conv2d_forward(x, w, b, stride: int = 1, pad: int = 0):
    """2D convolution (cross-correlation). Returns (y, cache)."""
    ho, wo = _conv_shapes(x, w, stride, pad)
    xp = _pad(np.ascontiguousarray(x, dtype=np.float64), pad)
    w = np.ascontiguousarray(w, dtype=np.float64)
    if use_numba("conv") and _conv_fwd_nb is not None:
        y = _conv_fwd_nb(xp, w, np.ascontiguousarray(b, dtype=np.float64), stride, ho, wo)
    else:
        cols = _im2col(xp, w.shape[2], w.shape[3], stride, ho, wo)
        w2 = w.reshape(w.shape[0], -1)
        y = np.matmul(w2[None], cols).reshape(x.shape[0], w.shape[0], ho, wo)
        y += b[None, :, None, None]
    return y, (xp, w, stride, pad, x.shape)


def conv2d_backward(dy, cache):
    """Gradients of conv2d: returns (dx, dw, db)."""
    xp, w, stride, pad, x_shape = cache
    dy = np.ascontiguousarray(dy, dtype=np.float64)
    if use_numba("conv") and _conv_bwd_nb is not None:
        dxp, dw, db = _conv_bwd_nb(dy, xp, w, stride)
    else:
        n = xp.shape[0]
        co, ci, kh, kw = w.shape
        ho, wo = dy.shape[2], dy.shape[3]
        cols = _im2col(xp, kh, kw, stride, ho, wo)
        dy2 = dy.reshape(n, co, ho * wo)
        db = dy2.sum(axis=(0, 2))
        dw = np.matmul(dy2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        dcols = np.matmul(w.reshape(co, -1).T[None], dy2)
        dcols = dcols.reshape(n, ci, kh, kw, ho, wo)
        dxp = np.zeros_like(xp)
        for ki in range(kh):
            for kj in range(kw):
                dxp[
                    :, :, ki : ki + ho * stride : stride, kj : kj + wo * stride : stride
                ] += dcols[:, :, ki, kj]
    if pad:
        dx = dxp[:, :, pad:-pad, pad:-pad]
    else:
        dx = dxp
    return np.ascontiguousarray(dx), dw, db


# ------------------------------------------------------------------ elementwise

def leaky_relu_forward(x, slope: float):
    y = np.where(x >= 0, x, slope * x)
    return y, (x >= 0, slope)


def leaky_relu_backward(dy, cache):
    pos, slope = cache
    return np.where(pos, dy, slope * dy)


def sigmoid_forward(x):
    y = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    return y, (y,)


def sigmoid_backward(dy, cache):
    (y,) = cache
    return dy * y * (1.0 - y)


# ------------------------------------------------------------------ resampling

def upsample_nearest2_forward(x):
    y = np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)
    return y, (x.shape,)


def upsample_nearest2_backward(dy, cache):
    n, c, h, w = cache[0]
    return dy.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5))


def global_avg_pool_forward(x):
    y = x.mean(axis=(2, 3))
    return y, (x.shape,)


def global_avg_pool_backward(dy, cache):
    n, c, h, w = cache[0]
    return np.broadcast_to(dy[:, :, None, None] / (h * w), (n, c, h, w)).copy()


# ------------------------------------------------------------------ dense

def linear_forward(x, w, b):
    return x @ w.T + b, (x, w)


def linear_backward(dy, cache):
    x, w = cache
    dx = dy @ w
    dw = dy.T @ x
    db = dy.sum(axis=0)
    return dx, dw, db


# ------------------------------------------------------------------ batchnorm

def batchnorm_forward(x, gamma, beta, running_mean, running_var, momentum, eps,
                      training: bool):
    """Per-channel batch normalization over (N, H, W).

    In training mode, normalizes with biased batch statistics and updates
    the running buffers in place (unbiased variance, matching the common
    convention).  In eval mode uses the running buffers.
    """
    if training:
        axes = (0, 2, 3)
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        cnt = x.shape[0] * x.shape[2] * x.shape[3]
        unbiased = var * cnt / max(cnt - 1, 1)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mean = running_mean
        var = running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    y = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    return y, (xhat, inv_std, gamma, training)


def batchnorm_backward(dy, cache):
    xhat, inv_std, gamma, training = cache
    axes = (0, 2, 3)
    dgamma = (dy * xhat).sum(axis=axes)
    dbeta = dy.sum(axis=axes)
    if not training:
        dx = dy * gamma[None, :, None, None] * inv_std[None, :, None, None]
        return dx, dgamma, dbeta
    m = dy.shape[0] * dy.shape[2] * dy.shape[3]
    dxhat = dy * gamma[None, :, None, None]
    dx = (
        inv_std[None, :, None, None]
        / m
        * (
            m * dxhat
            - dxhat.sum(axis=axes)[None, :, None, None]
            - xhat * (dxhat * xhat).sum(axis=axes)[None, :, None, None]
        )
    )
    return dx, dgamma, dbeta


# ------------------------------------------------------------------ dropout

def dropout_forward(x, rate: float, rng, training: bool):
    if not training or rate == 0.0:
        return x, (None,)
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * keep, (keep,)


def dropout_backward(dy, cache):
    (keep,) = cache
    if keep is None:
        return dy
    return dy * keep
