"""Pure-numpy kernels for im2col convolution, group norm and SiLU.

Reference implementation and import-time fallback for ``tsdm._ckernels``.
Both modules expose the same functions with the same semantics.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(x, kernel, stride, pad):
    """``(B, C, L)`` -> ``(B, C * K, L_out)`` patch tensor."""
    B, C, L = x.shape
    L_out = (L + 2 * pad - kernel) // stride + 1
    if kernel == 1 and stride == 1 and pad == 0:
        return x
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad))) if pad else x
    span = stride * (L_out - 1) + 1
    cols = np.empty((B, C, kernel, L_out), dtype=x.dtype)
    for k in range(kernel):
        cols[:, :, k, :] = xp[:, :, k:k + span:stride]
    return cols.reshape(B, C * kernel, L_out)


def col2im(cols, x_shape, kernel, stride, pad):
    """Adjoint of :func:`im2col`: scatter-add patches back to ``(B, C, L)``."""
    B, C, L = x_shape
    L_out = cols.shape[2]
    if kernel == 1 and stride == 1 and pad == 0:
        return cols
    c4 = cols.reshape(B, C, kernel, L_out)
    dxp = np.zeros((B, C, L + 2 * pad), dtype=cols.dtype)
    span = stride * (L_out - 1) + 1
    for k in range(kernel):
        dxp[:, :, k:k + span:stride] += c4[:, :, k, :]
    return np.ascontiguousarray(dxp[:, :, pad:pad + L])


def conv1d_forward(x, w, b, stride, pad):
    """Returns ``(y, cols)``; ``cols`` is the saved input patch tensor."""
    c_out, _, kernel = w.shape
    cols = im2col(x, kernel, stride, pad)
    y = np.matmul(w.reshape(c_out, -1), cols)
    y += b[:, None]
    return y, cols


def conv1d_backward(dy, cols, x_shape, w, stride, pad):
    c_out = w.shape[0]
    dw = np.matmul(dy, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
    db = dy.sum(axis=(0, 2))
    dcols = np.matmul(w.reshape(c_out, -1).T, dy)
    dx = col2im(dcols, x_shape, w.shape[2], stride, pad)
    return dx, dw, db


def group_norm_forward(x, gamma, beta, groups, eps):
    B, C, L = x.shape
    xg = x.reshape(B, groups, -1)
    mean = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mean) * rstd).reshape(B, C, L)
    y = xhat * gamma[:, None] + beta[:, None]
    return y, xhat, rstd.reshape(B, groups)


def group_norm_backward(dy, xhat, rstd, gamma, groups):
    B, C, L = dy.shape
    dgamma = (dy * xhat).sum(axis=(0, 2))
    dbeta = dy.sum(axis=(0, 2))
    dxh = (dy * gamma[:, None]).reshape(B, groups, -1)
    xh = xhat.reshape(B, groups, -1)
    m1 = dxh.mean(axis=2, keepdims=True)
    m2 = (dxh * xh).mean(axis=2, keepdims=True)
    dx = (dxh - m1 - xh * m2) * rstd[:, :, None]
    return dx.reshape(B, C, L), dgamma, dbeta


def silu_forward(x):
    s = 1.0 / (1.0 + np.exp(-x))
    return x * s, s


def silu_backward(dy, x, s):
    return dy * s * (1.0 + x * (1.0 - s))
