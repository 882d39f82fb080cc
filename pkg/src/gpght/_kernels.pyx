# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled row-wise kernels for masked softmax and layer normalization.

All functions take C-contiguous 2-D float64 arrays (rows x n) and mirror
``gpght._kernels_py`` exactly in semantics.
"""
import numpy as np
from libc.math cimport exp, sqrt, INFINITY


def softmax_fwd(const double[:, ::1] x, const unsigned char[:, ::1] mask):
    cdef Py_ssize_t rows = x.shape[0], n = x.shape[1], i, j
    cdef double m, s
    out_arr = np.zeros((rows, n), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef bint any_valid
    for i in range(rows):
        m = -INFINITY
        any_valid = False
        for j in range(n):
            if mask[i, j]:
                any_valid = True
                if x[i, j] > m:
                    m = x[i, j]
        if not any_valid:
            raise ValueError("masked_softmax: row %d has no unmasked entry" % i)
        s = 0.0
        for j in range(n):
            if mask[i, j]:
                out[i, j] = exp(x[i, j] - m)
                s += out[i, j]
        for j in range(n):
            out[i, j] = out[i, j] / s
    return out_arr


def softmax_bwd(const double[:, ::1] y, const double[:, ::1] gy):
    cdef Py_ssize_t rows = y.shape[0], n = y.shape[1], i, j
    cdef double dot
    out_arr = np.empty((rows, n), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    for i in range(rows):
        dot = 0.0
        for j in range(n):
            dot += gy[i, j] * y[i, j]
        for j in range(n):
            out[i, j] = y[i, j] * (gy[i, j] - dot)
    return out_arr


def layernorm_fwd(const double[:, ::1] x, double eps):
    cdef Py_ssize_t rows = x.shape[0], n = x.shape[1], i, j
    cdef double mean, var, d, inv
    xhat_arr = np.empty((rows, n), dtype=np.float64)
    inv_arr = np.empty(rows, dtype=np.float64)
    cdef double[:, ::1] xhat = xhat_arr
    cdef double[::1] inv_std = inv_arr
    for i in range(rows):
        mean = 0.0
        for j in range(n):
            mean += x[i, j]
        mean /= n
        var = 0.0
        for j in range(n):
            d = x[i, j] - mean
            var += d * d
        var /= n
        inv = 1.0 / sqrt(var + eps)
        inv_std[i] = inv
        for j in range(n):
            xhat[i, j] = (x[i, j] - mean) * inv
    return xhat_arr, inv_arr


def layernorm_bwd(const double[:, ::1] xhat, const double[::1] inv_std,
                  const double[:, ::1] g):
    cdef Py_ssize_t rows = xhat.shape[0], n = xhat.shape[1], i, j
    cdef double mg, mgx
    out_arr = np.empty((rows, n), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    for i in range(rows):
        mg = 0.0
        mgx = 0.0
        for j in range(n):
            mg += g[i, j]
            mgx += g[i, j] * xhat[i, j]
        mg /= n
        mgx /= n
        for j in range(n):
            out[i, j] = inv_std[i] * (g[i, j] - mg - xhat[i, j] * mgx)
    return out_arr
