# cython: language_level=3
"""Compiled inner loops. Signatures mirror ``_pykernels`` exactly."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()


def region_distances(const double[:, :, ::1] grid, const double[::1] desc,
                     const double[::1] inv_var, Py_ssize_t y0, Py_ssize_t y1,
                     Py_ssize_t x0, Py_ssize_t x1):
    cdef Py_ssize_t h = y1 - y0, w = x1 - x0, c = grid.shape[2]
    cdef Py_ssize_t i, j, k
    cdef double acc, diff
    out = np.empty((h, w), dtype=np.float64)
    cdef double[:, ::1] res = out
    for i in range(h):
        for j in range(w):
            acc = 0.0
            for k in range(c):
                diff = grid[y0 + i, x0 + j, k] - desc[k]
                acc += diff * diff * inv_var[k]
            res[i, j] = sqrt(acc)
    return out


def adc_scan(const unsigned char[:, ::1] codes, const double[:, ::1] table):
    cdef Py_ssize_t n = codes.shape[0], m = codes.shape[1]
    cdef Py_ssize_t i, j
    cdef double acc
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] res = out
    for i in range(n):
        acc = 0.0
        for j in range(m):
            acc += table[j, codes[i, j]]
        res[i] = acc
    return out


def abs_diff_sum(const unsigned char[::1] a, const unsigned char[::1] b):
    cdef Py_ssize_t n = a.shape[0], i
    cdef long long acc = 0
    cdef int d
    if b.shape[0] != n:
        raise ValueError("buffers differ in length")
    for i in range(n):
        d = <int>a[i] - <int>b[i]
        acc += d if d >= 0 else -d
    return acc
