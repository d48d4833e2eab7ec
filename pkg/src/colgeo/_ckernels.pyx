# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled im2col / col2im for the conv2d forward and backward passes."""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def im2col(double[:, :, :, ::1] xp, int kh, int kw, int stride, int dilation,
           int out_h, int out_w):
    cdef Py_ssize_t n = xp.shape[0], c = xp.shape[1]
    out = np.empty((n, c, kh, kw, out_h, out_w), dtype=np.float64)
    cdef double[:, :, :, :, :, ::1] cols = out
    cdef Py_ssize_t b, ch, i, j, y, x, yy
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        for y in range(out_h):
                            yy = y * stride + i * dilation
                            for x in range(out_w):
                                cols[b, ch, i, j, y, x] = xp[b, ch, yy, x * stride + j * dilation]
    return out


def col2im(double[:, :, :, :, :, ::1] cols, tuple padded_shape, int stride, int dilation):
    cdef Py_ssize_t n = cols.shape[0], c = cols.shape[1]
    cdef Py_ssize_t kh = cols.shape[2], kw = cols.shape[3]
    cdef Py_ssize_t out_h = cols.shape[4], out_w = cols.shape[5]
    out = np.zeros(padded_shape, dtype=np.float64)
    cdef double[:, :, :, ::1] xp = out
    cdef Py_ssize_t b, ch, i, j, y, x, yy
    # order (i, j) outermost per pixel matches the numpy fallback
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        for y in range(out_h):
                            yy = y * stride + i * dilation
                            for x in range(out_w):
                                xp[b, ch, yy, x * stride + j * dilation] += cols[b, ch, i, j, y, x]
    return out
