# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled im2col / col2im loops for the convolution ops."""
import numpy as np
cimport cython

ctypedef fused real:
    float
    double


def im2col(real[:, :, :, ::1] xp, int kh, int kw, int stride, int ho, int wo):
    cdef Py_ssize_t n = xp.shape[0], c = xp.shape[1]
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty((n, c * kh * kw, ho * wo), dtype=dtype)
    cdef real[:, :, ::1] out = out_arr
    cdef Py_ssize_t b, ch, i, j, y, x, row, col, iy
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        row = (ch * kh + i) * kw + j
                        col = 0
                        for y in range(ho):
                            iy = y * stride + i
                            for x in range(wo):
                                out[b, row, col] = xp[b, ch, iy, x * stride + j]
                                col += 1
    return out_arr


def col2im(real[:, :, ::1] cols, int c, int hp, int wp, int kh, int kw,
           int stride, int ho, int wo):
    cdef Py_ssize_t n = cols.shape[0]
    dtype = np.float32 if real is float else np.float64
    out_arr = np.zeros((n, c, hp, wp), dtype=dtype)
    cdef real[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, ch, i, j, y, x, row, col, iy
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        row = (ch * kh + i) * kw + j
                        col = 0
                        for y in range(ho):
                            iy = y * stride + i
                            for x in range(wo):
                                out[b, ch, iy, x * stride + j] += cols[b, row, col]
                                col += 1
    return out_arr
