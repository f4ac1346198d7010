# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled hot kernels: fused row softmax, layer norm, embedding-gradient
scatter-add, and the fused optimizer step. Mirrors kernels_py exactly;
float32 and float64 via fused types."""

import numpy as np

cimport cython
cimport numpy as cnp
from libc.math cimport exp, log, sqrt, isfinite

cnp.import_array()

IS_COMPILED = True

ctypedef fused real:
    float
    double


def softmax_fwd(real[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1]
    out_np = np.empty((n, d), dtype=np.asarray(x).dtype)
    cdef real[:, ::1] out = out_np
    cdef Py_ssize_t i, j
    cdef real m, s, v
    for i in range(n):
        m = x[i, 0]
        for j in range(1, d):
            if x[i, j] > m:
                m = x[i, j]
        if not isfinite(m):
            # fully masked row: all probabilities exactly zero
            for j in range(d):
                out[i, j] = 0.0
            continue
        s = 0.0
        for j in range(d):
            v = exp(x[i, j] - m)
            out[i, j] = v
            s += v
        for j in range(d):
            out[i, j] /= s
    return out_np


def softmax_bwd(real[:, ::1] y, real[:, ::1] dy):
    cdef Py_ssize_t n = y.shape[0], d = y.shape[1]
    dx_np = np.empty((n, d), dtype=np.asarray(y).dtype)
    cdef real[:, ::1] dx = dx_np
    cdef Py_ssize_t i, j
    cdef real dot
    for i in range(n):
        dot = 0.0
        for j in range(d):
            dot += y[i, j] * dy[i, j]
        for j in range(d):
            dx[i, j] = y[i, j] * (dy[i, j] - dot)
    return dx_np


def layernorm_fwd(real[:, ::1] x, real[::1] gain, real[::1] bias, double eps):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1]
    dt = np.asarray(x).dtype
    out_np = np.empty((n, d), dtype=dt)
    xhat_np = np.empty((n, d), dtype=dt)
    rstd_np = np.empty(n, dtype=dt)
    cdef real[:, ::1] out = out_np
    cdef real[:, ::1] xhat = xhat_np
    cdef real[::1] rstd = rstd_np
    cdef Py_ssize_t i, j
    cdef real mean, var, r, h
    for i in range(n):
        mean = 0.0
        for j in range(d):
            mean += x[i, j]
        mean /= d
        var = 0.0
        for j in range(d):
            var += (x[i, j] - mean) * (x[i, j] - mean)
        var /= d
        r = <real>(1.0 / sqrt(var + eps))
        rstd[i] = r
        for j in range(d):
            h = (x[i, j] - mean) * r
            xhat[i, j] = h
            out[i, j] = h * gain[j] + bias[j]
    return out_np, xhat_np, rstd_np


def layernorm_bwd(real[:, ::1] xhat, real[::1] rstd, real[::1] gain, real[:, ::1] dy):
    cdef Py_ssize_t n = xhat.shape[0], d = xhat.shape[1]
    dt = np.asarray(xhat).dtype
    dx_np = np.empty((n, d), dtype=dt)
    dg_np = np.zeros(d, dtype=dt)
    db_np = np.zeros(d, dtype=dt)
    cdef real[:, ::1] dx = dx_np
    cdef real[::1] dg = dg_np
    cdef real[::1] db = db_np
    cdef Py_ssize_t i, j
    cdef real m1, m2, g
    for i in range(n):
        m1 = 0.0
        m2 = 0.0
        for j in range(d):
            g = dy[i, j] * gain[j]
            m1 += g
            m2 += g * xhat[i, j]
            dg[j] += dy[i, j] * xhat[i, j]
            db[j] += dy[i, j]
        m1 /= d
        m2 /= d
        for j in range(d):
            dx[i, j] = rstd[i] * (dy[i, j] * gain[j] - m1 - xhat[i, j] * m2)
    return dx_np, dg_np, db_np


def embedding_bwd(cnp.int64_t[::1] ids, real[:, ::1] dy, real[:, ::1] dw):
    cdef Py_ssize_t n = ids.shape[0], d = dy.shape[1]
    cdef Py_ssize_t i, j, row
    for i in range(n):
        row = ids[i]
        for j in range(d):
            dw[row, j] += dy[i, j]


def adam_step(real[::1] p, real[::1] g, real[::1] m, real[::1] v, real[::1] vhat,
              double lr, double beta1, double beta2, double eps, long t, bint amsgrad):
    cdef Py_ssize_t n = p.shape[0]
    cdef Py_ssize_t i
    cdef double bc1 = 1.0 - beta1 ** t
    cdef double bc2 = 1.0 - beta2 ** t
    cdef double mi, vi, vc
    for i in range(n):
        mi = beta1 * m[i] + (1.0 - beta1) * g[i]
        vi = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i]
        m[i] = <real>mi
        v[i] = <real>vi
        if amsgrad:
            if vi > vhat[i]:
                vhat[i] = <real>vi
            vc = vhat[i] / bc2
        else:
            vc = vi / bc2
        p[i] -= <real>(lr * (mi / bc1) / (sqrt(vc) + eps))
