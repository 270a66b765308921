# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled hot kernels: im2col / col2im for the convolution ops.

Layouts match the numpy fallback in segheads.backend exactly, including
the per-cell accumulation order of col2im, so results are bitwise
identical across backends.
"""

import numpy as np

cimport cython


ctypedef fused floating:
    float
    double


def im2col(floating[:, :, :, ::1] xp, Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride):
    cdef Py_ssize_t n = xp.shape[0]
    cdef Py_ssize_t c = xp.shape[1]
    cdef Py_ssize_t hp = xp.shape[2]
    cdef Py_ssize_t wp = xp.shape[3]
    cdef Py_ssize_t oh = (hp - kh) // stride + 1
    cdef Py_ssize_t ow = (wp - kw) // stride + 1

    if floating is float:
        out_arr = np.empty((n, c * kh * kw, oh * ow), dtype=np.float32)
    else:
        out_arr = np.empty((n, c * kh * kw, oh * ow), dtype=np.float64)
    cdef floating[:, :, ::1] out = out_arr

    cdef Py_ssize_t bi, ci, ki, kj, oi, oj, row
    with nogil:
        for bi in range(n):
            for ci in range(c):
                for ki in range(kh):
                    for kj in range(kw):
                        row = (ci * kh + ki) * kw + kj
                        for oi in range(oh):
                            for oj in range(ow):
                                out[bi, row, oi * ow + oj] = \
                                    xp[bi, ci, oi * stride + ki, oj * stride + kj]
    return out_arr


def col2im(floating[:, :, ::1] cols, Py_ssize_t n, Py_ssize_t c,
           Py_ssize_t h, Py_ssize_t w, Py_ssize_t kh, Py_ssize_t kw,
           Py_ssize_t stride):
    cdef Py_ssize_t oh = (h - kh) // stride + 1
    cdef Py_ssize_t ow = (w - kw) // stride + 1

    if floating is float:
        out_arr = np.zeros((n, c, h, w), dtype=np.float32)
    else:
        out_arr = np.zeros((n, c, h, w), dtype=np.float64)
    cdef floating[:, :, :, ::1] out = out_arr

    cdef Py_ssize_t bi, ci, ki, kj, oi, oj, row
    with nogil:
        for bi in range(n):
            for ci in range(c):
                for ki in range(kh):
                    for kj in range(kw):
                        row = (ci * kh + ki) * kw + kj
                        for oi in range(oh):
                            for oj in range(ow):
                                out[bi, ci, oi * stride + ki, oj * stride + kj] += \
                                    cols[bi, row, oi * ow + oj]
    return out_arr
