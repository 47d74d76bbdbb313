# cython: boundscheck=False, wraparound=False, cdivision=True
# Fused inner loops for the hottest forward/backward kernels.  Contracts
# match mldrkd._kernels_np exactly; the backend module picks one at import.

import numpy as np

from libc.math cimport exp, tanh

cdef double GELU_K = 0.7978845608028654   # sqrt(2/pi)
cdef double GELU_A = 0.044715


def softmax2d_fwd(double[:, ::1] x):
    """Row softmax of a (R, C) array with max-subtraction."""
    cdef Py_ssize_t R = x.shape[0], C = x.shape[1]
    out_arr = np.empty((R, C), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t r, c
    cdef double m, s, v
    with nogil:
        for r in range(R):
            m = x[r, 0]
            for c in range(1, C):
                if x[r, c] > m:
                    m = x[r, c]
            s = 0.0
            for c in range(C):
                v = exp(x[r, c] - m)
                out[r, c] = v
                s += v
            s = 1.0 / s
            for c in range(C):
                out[r, c] *= s
    return out_arr


def softmax2d_bwd(double[:, ::1] y, double[:, ::1] g):
    """Gradient of row softmax: (g - <g, y>) * y per row."""
    cdef Py_ssize_t R = y.shape[0], C = y.shape[1]
    out_arr = np.empty((R, C), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t r, c
    cdef double dot
    with nogil:
        for r in range(R):
            dot = 0.0
            for c in range(C):
                dot += g[r, c] * y[r, c]
            for c in range(C):
                out[r, c] = (g[r, c] - dot) * y[r, c]
    return out_arr


def gelu1d_fwd(double[::1] x):
    """Elementwise GELU, tanh approximation."""
    cdef Py_ssize_t n = x.shape[0]
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i
    cdef double v, t
    with nogil:
        for i in range(n):
            v = x[i]
            t = tanh(GELU_K * (v + GELU_A * v * v * v))
            out[i] = 0.5 * v * (1.0 + t)
    return out_arr


def gelu1d_bwd(double[::1] x, double[::1] g):
    """Gradient of the tanh-approximation GELU."""
    cdef Py_ssize_t n = x.shape[0]
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i
    cdef double v, t, d
    with nogil:
        for i in range(n):
            v = x[i]
            t = tanh(GELU_K * (v + GELU_A * v * v * v))
            d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_A * v * v)
            out[i] = g[i] * d
    return out_arr
