# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled hot kernels: the im2col patch gather (row memcpys) and the
integer-code convolution. GEMMs stay in BLAS via the shared orchestration."""

from libc.string cimport memcpy

import numpy as np

cimport numpy as cnp

NAME = "native"


def im2col_t(cnp.ndarray[cnp.float32_t, ndim=4] x, Py_ssize_t k):
    """(N,C,H,W) -> (N, C*k*k, H*W) patch columns under zero 'same' padding."""
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t p = k // 2
    cdef cnp.ndarray[cnp.float32_t, ndim=4] xp = np.zeros(
        (n, c, h + 2 * p, w + 2 * p), dtype=np.float32)
    xp[:, :, p : p + h, p : p + w] = x
    cdef cnp.ndarray[cnp.float32_t, ndim=3] cols = np.empty(
        (n, c * k * k, h * w), dtype=np.float32)
    cdef float[:, :, :, ::1] xv = xp
    cdef float[:, :, ::1] cv = cols
    cdef Py_ssize_t ni, ci, kh, kw, hi, row
    with nogil:
        for ni in range(n):
            for ci in range(c):
                for kh in range(k):
                    for kw in range(k):
                        row = (ci * k + kh) * k + kw
                        for hi in range(h):
                            memcpy(&cv[ni, row, hi * w],
                                   &xv[ni, ci, hi + kh, kw],
                                   w * sizeof(float))
    return cols


def int_conv2d_fwd(cnp.ndarray[cnp.int32_t, ndim=4] act_codes,
                   cnp.ndarray[cnp.int8_t, ndim=4] w_codes):
    """Integer correlation with 64-bit accumulation (int32 NCHW x int8 OIKK)."""
    cdef Py_ssize_t n = act_codes.shape[0], c = act_codes.shape[1]
    cdef Py_ssize_t h = act_codes.shape[2], wd = act_codes.shape[3]
    cdef Py_ssize_t o = w_codes.shape[0], k = w_codes.shape[2]
    cdef Py_ssize_t p = k // 2
    cdef cnp.ndarray[cnp.int32_t, ndim=4] xp = np.zeros(
        (n, c, h + 2 * p, wd + 2 * p), dtype=np.int32)
    xp[:, :, p : p + h, p : p + wd] = act_codes
    cdef cnp.ndarray[cnp.int64_t, ndim=4] out = np.zeros(
        (n, o, h, wd), dtype=np.int64)
    cdef cnp.int32_t[:, :, :, ::1] xv = xp
    cdef cnp.int8_t[:, :, :, ::1] wv = w_codes
    cdef cnp.int64_t[:, :, :, ::1] ov = out
    cdef Py_ssize_t ni, oi, ci, kh, kw, hi, j
    cdef cnp.int64_t coef
    with nogil:
        for ni in range(n):
            for oi in range(o):
                for ci in range(c):
                    for kh in range(k):
                        for kw in range(k):
                            coef = wv[oi, ci, kh, kw]
                            if coef == 0:
                                continue
                            for hi in range(h):
                                for j in range(wd):
                                    ov[ni, oi, hi, j] += coef * xv[ni, ci, hi + kh, j + kw]
    return out
