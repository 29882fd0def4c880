# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels mirroring ``tsdm._kernels_py``."""

import numpy as np
cimport cython
from cython cimport floating
from libc.math cimport sqrt
from libc.string cimport memcpy, memset


cdef inline void _valid_range(Py_ssize_t k, Py_ssize_t stride, Py_ssize_t pad, Py_ssize_t L,
                              Py_ssize_t L_out, Py_ssize_t* lo, Py_ssize_t* hi) noexcept nogil:
    # outputs o with 0 <= o*stride + k - pad < L
    cdef Py_ssize_t a = pad - k
    lo[0] = 0 if a <= 0 else (a + stride - 1) // stride
    hi[0] = (L - 1 + pad - k) // stride + 1 if L - 1 + pad - k >= 0 else 0
    if hi[0] > L_out:
        hi[0] = L_out
    if lo[0] > hi[0]:
        lo[0] = hi[0]


def _im2col(const floating[:, :, ::1] x, floating[:, :, ::1] cols,
            int kernel, int stride, int pad):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], L = x.shape[2]
    cdef Py_ssize_t L_out = cols.shape[2]
    cdef Py_ssize_t b, o, c, k, row, lo, hi, off
    with nogil:
        for k in range(kernel):
            _valid_range(k, stride, pad, L, L_out, &lo, &hi)
            off = k - pad
            for b in range(B):
                for c in range(C):
                    row = c * kernel + k
                    if lo > 0:
                        memset(&cols[b, row, 0], 0, lo * sizeof(floating))
                    if hi < L_out:
                        memset(&cols[b, row, hi], 0, (L_out - hi) * sizeof(floating))
                    if hi <= lo:
                        continue
                    if stride == 1:
                        memcpy(&cols[b, row, lo], &x[b, c, lo + off], (hi - lo) * sizeof(floating))
                    else:
                        for o in range(lo, hi):
                            cols[b, row, o] = x[b, c, o * stride + off]


def _col2im(const floating[:, :, ::1] cols, floating[:, :, ::1] dx,
            int kernel, int stride, int pad):
    cdef Py_ssize_t B = dx.shape[0], C = dx.shape[1], L = dx.shape[2]
    cdef Py_ssize_t L_out = cols.shape[2]
    cdef Py_ssize_t b, o, c, k, row, lo, hi, off
    with nogil:
        for k in range(kernel):
            _valid_range(k, stride, pad, L, L_out, &lo, &hi)
            off = k - pad
            for b in range(B):
                for c in range(C):
                    row = c * kernel + k
                    for o in range(lo, hi):
                        dx[b, c, o * stride + off] += cols[b, row, o]


def im2col(x, int kernel, int stride, int pad):
    if kernel == 1 and stride == 1 and pad == 0:
        return x
    x = np.ascontiguousarray(x)
    B, C, L = x.shape
    L_out = (L + 2 * pad - kernel) // stride + 1
    cols = np.empty((B, C * kernel, L_out), dtype=x.dtype)
    _im2col(x, cols, kernel, stride, pad)
    return cols


def col2im(cols, x_shape, int kernel, int stride, int pad):
    if kernel == 1 and stride == 1 and pad == 0:
        return cols
    cols = np.ascontiguousarray(cols)
    dx = np.zeros(x_shape, dtype=cols.dtype)
    _col2im(cols, dx, kernel, stride, pad)
    return dx


def conv1d_forward(x, w, b, int stride, int pad):
    c_out, _, kernel = w.shape
    cols = im2col(x, kernel, stride, pad)
    y = np.matmul(w.reshape(c_out, -1), cols)
    y += b[:, None]
    return y, cols


def conv1d_backward(dy, cols, x_shape, w, int stride, int pad):
    c_out = w.shape[0]
    dw = np.matmul(dy, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
    db = dy.sum(axis=(0, 2))
    dcols = np.matmul(w.reshape(c_out, -1).T, dy)
    dx = col2im(dcols, x_shape, w.shape[2], stride, pad)
    return dx, dw, db


def _gn_fwd(const floating[:, :, ::1] x, const floating[::1] gamma,
            const floating[::1] beta, floating[:, :, ::1] y,
            floating[:, :, ::1] xhat, floating[:, ::1] rstd,
            int groups, double eps):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], L = x.shape[2]
    cdef Py_ssize_t cpg = C // groups
    cdef Py_ssize_t b, g, c, i
    cdef double s, ss, mean, var, r, n = cpg * L, v
    with nogil:
        for b in range(B):
            for g in range(groups):
                s = 0.0
                for c in range(g * cpg, (g + 1) * cpg):
                    for i in range(L):
                        s = s + x[b, c, i]
                mean = s / n
                ss = 0.0
                for c in range(g * cpg, (g + 1) * cpg):
                    for i in range(L):
                        v = x[b, c, i] - mean
                        ss = ss + v * v
                var = ss / n
                r = 1.0 / sqrt(var + eps)
                rstd[b, g] = r
                for c in range(g * cpg, (g + 1) * cpg):
                    for i in range(L):
                        v = (x[b, c, i] - mean) * r
                        xhat[b, c, i] = v
                        y[b, c, i] = v * gamma[c] + beta[c]


def _gn_bwd(const floating[:, :, ::1] dy, const floating[:, :, ::1] xhat,
            const floating[:, ::1] rstd, const floating[::1] gamma,
            floating[:, :, ::1] dx, double[::1] dgamma, double[::1] dbeta,
            int groups):
    cdef Py_ssize_t B = dy.shape[0], C = dy.shape[1], L = dy.shape[2]
    cdef Py_ssize_t cpg = C // groups
    cdef Py_ssize_t b, g, c, i
    cdef double m1, m2, d, n = cpg * L, r
    with nogil:
        for b in range(B):
            for g in range(groups):
                m1 = 0.0
                m2 = 0.0
                for c in range(g * cpg, (g + 1) * cpg):
                    for i in range(L):
                        d = dy[b, c, i] * gamma[c]
                        m1 = m1 + d
                        m2 = m2 + d * xhat[b, c, i]
                        dgamma[c] += dy[b, c, i] * xhat[b, c, i]
                        dbeta[c] += dy[b, c, i]
                m1 = m1 / n
                m2 = m2 / n
                r = rstd[b, g]
                for c in range(g * cpg, (g + 1) * cpg):
                    for i in range(L):
                        d = dy[b, c, i] * gamma[c]
                        dx[b, c, i] = (d - m1 - xhat[b, c, i] * m2) * r


def group_norm_forward(x, gamma, beta, int groups, double eps):
    x = np.ascontiguousarray(x)
    gamma = np.ascontiguousarray(gamma, dtype=x.dtype)
    beta = np.ascontiguousarray(beta, dtype=x.dtype)
    y = np.empty_like(x)
    xhat = np.empty_like(x)
    rstd = np.empty((x.shape[0], groups), dtype=x.dtype)
    _gn_fwd(x, gamma, beta, y, xhat, rstd, groups, eps)
    return y, xhat, rstd


def group_norm_backward(dy, xhat, rstd, gamma, int groups):
    dy = np.ascontiguousarray(dy, dtype=xhat.dtype)
    gamma = np.ascontiguousarray(gamma, dtype=xhat.dtype)
    dx = np.empty_like(dy)
    dgamma = np.zeros(dy.shape[1], dtype=np.float64)
    dbeta = np.zeros(dy.shape[1], dtype=np.float64)
    _gn_bwd(dy, xhat, rstd, gamma, dx, dgamma, dbeta, groups)
    return dx, dgamma.astype(dy.dtype), dbeta.astype(dy.dtype)
