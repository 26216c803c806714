# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled im2col / col2im kernels; same layout contract as ``_pykernels``."""
import numpy as np
cimport cython

ctypedef fused real:
    float
    double


def im2col2d(real[:, :, :, ::1] x, int kh, int kw, int sh, int sw):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = (h - kh) // sh + 1, ow = (w - kw) // sw + 1
    cdef Py_ssize_t kk = c * kh * kw
    dtype = np.float32 if real is float else np.float64
    out = np.empty((n * oh * ow, kk), dtype=dtype)
    cdef real[:, ::1] cols = out
    cdef Py_ssize_t b, y, xo, ch, i, j, row, col
    with nogil:
        for b in range(n):
            for y in range(oh):
                for xo in range(ow):
                    row = (b * oh + y) * ow + xo
                    col = 0
                    for ch in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                cols[row, col] = x[b, ch, y * sh + i, xo * sw + j]
                                col += 1
    return out


def col2im2d(real[:, ::1] cols, Py_ssize_t n, Py_ssize_t c, Py_ssize_t h, Py_ssize_t w,
             int kh, int kw, int sh, int sw):
    cdef Py_ssize_t oh = (h - kh) // sh + 1, ow = (w - kw) // sw + 1
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((n, c, h, w), dtype=dtype)
    cdef real[:, :, :, ::1] img = out
    cdef Py_ssize_t b, y, xo, ch, i, j, row, col
    with nogil:
        for b in range(n):
            for y in range(oh):
                for xo in range(ow):
                    row = (b * oh + y) * ow + xo
                    col = 0
                    for ch in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                img[b, ch, y * sh + i, xo * sw + j] += cols[row, col]
                                col += 1
    return out


def im2col3d(real[:, :, :, :, ::1] x, int kd, int kh, int kw, int sd, int sh, int sw):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1]
    cdef Py_ssize_t d = x.shape[2], h = x.shape[3], w = x.shape[4]
    cdef Py_ssize_t od = (d - kd) // sd + 1, oh = (h - kh) // sh + 1, ow = (w - kw) // sw + 1
    dtype = np.float32 if real is float else np.float64
    out = np.empty((n * od * oh * ow, c * kd * kh * kw), dtype=dtype)
    cdef real[:, ::1] cols = out
    cdef Py_ssize_t b, z, y, xo, ch, a, i, j, row, col
    with nogil:
        for b in range(n):
            for z in range(od):
                for y in range(oh):
                    for xo in range(ow):
                        row = ((b * od + z) * oh + y) * ow + xo
                        col = 0
                        for ch in range(c):
                            for a in range(kd):
                                for i in range(kh):
                                    for j in range(kw):
                                        cols[row, col] = x[b, ch, z * sd + a, y * sh + i, xo * sw + j]
                                        col += 1
    return out


def col2im3d(real[:, ::1] cols, Py_ssize_t n, Py_ssize_t c, Py_ssize_t d, Py_ssize_t h,
             Py_ssize_t w, int kd, int kh, int kw, int sd, int sh, int sw):
    cdef Py_ssize_t od = (d - kd) // sd + 1, oh = (h - kh) // sh + 1, ow = (w - kw) // sw + 1
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((n, c, d, h, w), dtype=dtype)
    cdef real[:, :, :, :, ::1] img = out
    cdef Py_ssize_t b, z, y, xo, ch, a, i, j, row, col
    with nogil:
        for b in range(n):
            for z in range(od):
                for y in range(oh):
                    for xo in range(ow):
                        row = ((b * od + z) * oh + y) * ow + xo
                        col = 0
                        for ch in range(c):
                            for a in range(kd):
                                for i in range(kh):
                                    for j in range(kw):
                                        img[b, ch, z * sd + a, y * sh + i, xo * sw + j] += cols[row, col]
                                        col += 1
    return out
