# cython: language_level=3, boundscheck=False, wraparound=False, initializedcheck=False, cdivision=True
"""Compiled gather/scatter kernels for the convolution and pooling layers.

Float behavior matches the NumPy fallback exactly: col2im accumulates in
offset-major order per element and pooling takes the first maximum of
the row-major 2x2 window. Parallelism splits whole images across
threads, so results are bit-identical regardless of thread count.
"""

import numpy as np

cimport cython
from cython.parallel cimport prange

ctypedef fused floating:
    float
    double


def im2col3x3(floating[:, :, :, ::1] x):
    cdef Py_ssize_t b = x.shape[0], h = x.shape[1], w = x.shape[2], c = x.shape[3]
    dtype = np.float32 if floating is float else np.float64
    xp_arr = np.zeros((b, h + 2, w + 2, c), dtype=dtype)
    xp_arr[:, 1:-1, 1:-1, :] = x
    out = np.empty((b, h, w, 9, c), dtype=dtype)
    cdef floating[:, :, :, ::1] xp = xp_arr
    cdef floating[:, :, :, :, ::1] cols = out
    cdef Py_ssize_t ib, i, j, k, ic
    with nogil:
        for ib in prange(b, schedule='static'):
            for i in range(h):
                for j in range(w):
                    for k in range(9):
                        for ic in range(c):
                            cols[ib, i, j, k, ic] = xp[ib, i + k // 3, j + k % 3, ic]
    return out


def col2im3x3(floating[:, :, :, :, ::1] cols):
    cdef Py_ssize_t b = cols.shape[0], h = cols.shape[1], w = cols.shape[2], c = cols.shape[4]
    dtype = np.float32 if floating is float else np.float64
    xp_arr = np.zeros((b, h + 2, w + 2, c), dtype=dtype)
    cdef floating[:, :, :, ::1] xp = xp_arr
    cdef Py_ssize_t ib, i, j, k, ic
    with nogil:
        # Offset-major accumulation per image: identical float summation
        # order to the fallback's per-offset vectorized adds.
        for ib in prange(b, schedule='static'):
            for k in range(9):
                for i in range(h):
                    for j in range(w):
                        for ic in range(c):
                            xp[ib, i + k // 3, j + k % 3, ic] += cols[ib, i, j, k, ic]
    return np.ascontiguousarray(xp_arr[:, 1:-1, 1:-1, :])


def maxpool2x2(floating[:, :, :, ::1] x):
    cdef Py_ssize_t b = x.shape[0], h = x.shape[1], w = x.shape[2], c = x.shape[3]
    cdef Py_ssize_t h2 = h // 2, w2 = w // 2
    dtype = np.float32 if floating is float else np.float64
    pooled_arr = np.empty((b, h2, w2, c), dtype=dtype)
    idx_arr = np.empty((b, h2, w2, c), dtype=np.uint8)
    cdef floating[:, :, :, ::1] pooled = pooled_arr
    cdef unsigned char[:, :, :, ::1] idx = idx_arr
    cdef Py_ssize_t ib, i, j, ic, k
    cdef floating best, v
    cdef unsigned char best_k
    with nogil:
        for ib in prange(b, schedule='static'):
            for i in range(h2):
                for j in range(w2):
                    for ic in range(c):
                        best = x[ib, 2 * i, 2 * j, ic]
                        best_k = 0
                        for k in range(1, 4):
                            v = x[ib, 2 * i + k // 2, 2 * j + k % 2, ic]
                            if v > best:
                                best = v
                                best_k = <unsigned char> k
                        pooled[ib, i, j, ic] = best
                        idx[ib, i, j, ic] = best_k
    return pooled_arr, idx_arr


def maxpool2x2_backward(floating[:, :, :, ::1] grad, unsigned char[:, :, :, ::1] idx):
    cdef Py_ssize_t b = grad.shape[0], h2 = grad.shape[1], w2 = grad.shape[2], c = grad.shape[3]
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((b, h2 * 2, w2 * 2, c), dtype=dtype)
    cdef floating[:, :, :, ::1] dx = out
    cdef Py_ssize_t ib, i, j, ic, k
    with nogil:
        for ib in prange(b, schedule='static'):
            for i in range(h2):
                for j in range(w2):
                    for ic in range(c):
                        k = idx[ib, i, j, ic]
                        dx[ib, 2 * i + k // 2, 2 * j + k % 2, ic] = grad[ib, i, j, ic]
    return out
