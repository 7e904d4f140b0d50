# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the kernels in ``_pykernels``."""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def patch_moments(plane, int size):
    cdef double[:, ::1] p = np.ascontiguousarray(plane, dtype=np.float64)
    cdef Py_ssize_t rows = p.shape[0] // size
    cdef Py_ssize_t cols = p.shape[1] // size
    means_arr = np.empty((rows, cols), dtype=np.float64)
    vars_arr = np.empty((rows, cols), dtype=np.float64)
    cdef double[:, ::1] means = means_arr
    cdef double[:, ::1] variances = vars_arr
    cdef Py_ssize_t r, c, i, j
    cdef double s, d, acc
    cdef double n = <double>(size * size)
    for r in range(rows):
        for c in range(cols):
            s = 0.0
            for i in range(r * size, (r + 1) * size):
                for j in range(c * size, (c + 1) * size):
                    s += p[i, j]
            s /= n
            acc = 0.0
            for i in range(r * size, (r + 1) * size):
                for j in range(c * size, (c + 1) * size):
                    d = p[i, j] - s
                    acc += d * d
            means[r, c] = s
            variances[r, c] = acc / n
    return means_arr, vars_arr


def depthwise3x3(x, w):
    cdef double[:, :, :, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[:, :, ::1] wv = np.ascontiguousarray(w, dtype=np.float64)
    cdef Py_ssize_t nb = xv.shape[0], nc = xv.shape[1], h = xv.shape[2], wd = xv.shape[3]
    out_arr = np.zeros((nb, nc, h, wd), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, c, y, x0, i, j, yy, xx
    cdef double acc
    for b in range(nb):
        for c in range(nc):
            for y in range(h):
                for x0 in range(wd):
                    acc = 0.0
                    for i in range(3):
                        yy = y + i - 1
                        if yy < 0 or yy >= h:
                            continue
                        for j in range(3):
                            xx = x0 + j - 1
                            if xx < 0 or xx >= wd:
                                continue
                            acc += xv[b, c, yy, xx] * wv[c, i, j]
                    out[b, c, y, x0] = acc
    return out_arr


def depthwise3x3_backward(gout, x, w):
    cdef double[:, :, :, ::1] gv = np.ascontiguousarray(gout, dtype=np.float64)
    cdef double[:, :, :, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[:, :, ::1] wv = np.ascontiguousarray(w, dtype=np.float64)
    cdef Py_ssize_t nb = xv.shape[0], nc = xv.shape[1], h = xv.shape[2], wd = xv.shape[3]
    gx_arr = np.zeros((nb, nc, h, wd), dtype=np.float64)
    gw_arr = np.zeros((nc, 3, 3), dtype=np.float64)
    cdef double[:, :, :, ::1] gx = gx_arr
    cdef double[:, :, ::1] gw = gw_arr
    cdef Py_ssize_t b, c, y, x0, i, j, yy, xx
    cdef double g
    for b in range(nb):
        for c in range(nc):
            for y in range(h):
                for x0 in range(wd):
                    g = gv[b, c, y, x0]
                    if g == 0.0:
                        continue
                    for i in range(3):
                        yy = y + i - 1
                        if yy < 0 or yy >= h:
                            continue
                        for j in range(3):
                            xx = x0 + j - 1
                            if xx < 0 or xx >= wd:
                                continue
                            gw[c, i, j] += g * xv[b, c, yy, xx]
                            gx[b, c, yy, xx] += g * wv[c, i, j]
    return gx_arr, gw_arr
