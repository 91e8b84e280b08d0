# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled dense-layer kernels.

Row-major float64 layout throughout: ``x`` is (batch, in), ``W`` is (out, in),
``out`` is (batch, out). Matrix products go through the BLAS bundled with
scipy; bias, activation and the finiteness scan are fused into one pass.
"""
import numpy as np

from libc.math cimport isfinite, tanh
from scipy.linalg.cython_blas cimport dgemm

cdef enum:
    ACT_LINEAR = 0
    ACT_RELU = 1
    ACT_TANH = 2


def dense_forward(const double[:, ::1] x, const double[:, ::1] W,
                  const double[::1] b, int act):
    """Return ``(act(x @ W.T + b), all_finite)``."""
    cdef int n = x.shape[0]
    cdef int k = x.shape[1]
    cdef int m = W.shape[0]
    cdef double one = 1.0, zero = 0.0
    cdef Py_ssize_t i, j
    cdef double v
    cdef bint finite = True
    out_arr = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    if n == 0 or m == 0:
        return out_arr, True
    if k == 0:
        out[:, :] = 0.0
    else:
        dgemm(b"T", b"N", &m, &n, &k, &one, <double*>&W[0, 0], &k,
              <double*>&x[0, 0], &k, &zero, &out[0, 0], &m)
    for i in range(n):
        for j in range(m):
            v = out[i, j] + b[j]
            if act == ACT_RELU:
                if v < 0.0:
                    v = 0.0
            elif act == ACT_TANH:
                v = tanh(v)
            if not isfinite(v):
                finite = False
            out[i, j] = v
    return out_arr, finite


def dense_backward(const double[:, ::1] x, const double[:, ::1] W,
                   const double[:, ::1] out, const double[:, ::1] g_out,
                   int act, bint need_dx):
    """Return ``(dW, db, dx)`` for one layer; ``dx`` is None unless requested."""
    cdef int n = x.shape[0]
    cdef int k = x.shape[1]
    cdef int m = W.shape[0]
    cdef double one = 1.0, zero = 0.0
    cdef Py_ssize_t i, j
    cdef double o
    g_arr = np.empty((n, m), dtype=np.float64)
    dW_arr = np.zeros((m, k), dtype=np.float64)
    db_arr = np.zeros(m, dtype=np.float64)
    cdef double[:, ::1] g = g_arr
    cdef double[::1] db = db_arr
    for i in range(n):
        for j in range(m):
            if act == ACT_RELU:
                g[i, j] = g_out[i, j] if out[i, j] > 0.0 else 0.0
            elif act == ACT_TANH:
                o = out[i, j]
                g[i, j] = g_out[i, j] * (1.0 - o * o)
            else:
                g[i, j] = g_out[i, j]
            db[j] += g[i, j]
    cdef double[:, ::1] dW = dW_arr
    if n > 0 and m > 0 and k > 0:
        dgemm(b"N", b"T", &k, &m, &n, &one, <double*>&x[0, 0], &k,
              &g[0, 0], &m, &zero, &dW[0, 0], &k)
    if not need_dx:
        return dW_arr, db_arr, None
    dx_arr = np.zeros((n, k), dtype=np.float64)
    cdef double[:, ::1] dx = dx_arr
    if n > 0 and m > 0 and k > 0:
        dgemm(b"N", b"N", &k, &n, &m, &one, <double*>&W[0, 0], &k,
              &g[0, 0], &m, &zero, &dx[0, 0], &k)
    return dW_arr, db_arr, dx_arr
