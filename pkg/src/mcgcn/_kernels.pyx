# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled segment kernels; drop-in replacements for ``_kernels_py``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, INFINITY

cnp.import_array()

BACKEND = "cython"


def segment_sum(values, segments, Py_ssize_t num_segments):
    arr = np.ascontiguousarray(values, dtype=np.float64)
    tail = arr.shape[1:]
    cdef Py_ssize_t c = 1
    for d in tail:
        c *= d
    cdef const double[:, ::1] v = arr.reshape(arr.shape[0], c)
    cdef const long long[::1] seg = np.ascontiguousarray(segments, dtype=np.int64)
    cdef Py_ssize_t n = v.shape[0], i, j, s
    out = np.zeros((num_segments, c), dtype=np.float64)
    cdef double[:, ::1] o = out
    for i in range(n):
        s = seg[i]
        if s < 0 or s >= num_segments:
            raise IndexError("segment id out of range")
        for j in range(c):
            o[s, j] += v[i, j]
    return out.reshape((num_segments,) + tail)


def segment_softmax_forward(values, segments, Py_ssize_t num_segments, double beta):
    cdef const double[:, ::1] v = np.ascontiguousarray(values, dtype=np.float64)
    cdef const long long[::1] seg = np.ascontiguousarray(segments, dtype=np.int64)
    cdef Py_ssize_t n = v.shape[0], c = v.shape[1], i, j, s
    mx_arr = np.full((num_segments, c), -INFINITY)
    den_arr = np.zeros((num_segments, c))
    out = np.zeros((num_segments, c))
    weights = np.empty((n, c))
    cdef double[:, ::1] mx = mx_arr
    cdef double[:, ::1] den = den_arr
    cdef double[:, ::1] o = out
    cdef double[:, ::1] w = weights
    cdef double z
    for i in range(n):
        s = seg[i]
        if s < 0 or s >= num_segments:
            raise IndexError("segment id out of range")
        for j in range(c):
            z = beta * v[i, j]
            if z > mx[s, j]:
                mx[s, j] = z
    for i in range(n):
        s = seg[i]
        for j in range(c):
            z = exp(beta * v[i, j] - mx[s, j])
            w[i, j] = z
            den[s, j] += z
    for i in range(n):
        s = seg[i]
        for j in range(c):
            w[i, j] = w[i, j] / den[s, j]
            o[s, j] += w[i, j] * v[i, j]
    return out, weights


def segment_softmax_backward(grad_out, values, weights, out, segments, double beta):
    cdef const double[:, ::1] g = np.ascontiguousarray(grad_out, dtype=np.float64)
    cdef const double[:, ::1] v = np.ascontiguousarray(values, dtype=np.float64)
    cdef const double[:, ::1] w = np.ascontiguousarray(weights, dtype=np.float64)
    cdef const double[:, ::1] o = np.ascontiguousarray(out, dtype=np.float64)
    cdef const long long[::1] seg = np.ascontiguousarray(segments, dtype=np.int64)
    cdef Py_ssize_t n = v.shape[0], c = v.shape[1], i, j, s
    res = np.empty((n, c))
    cdef double[:, ::1] r = res
    for i in range(n):
        s = seg[i]
        for j in range(c):
            r[i, j] = g[s, j] * w[i, j] * (1.0 + beta * (v[i, j] - o[s, j]))
    return res


def gather_rows(x, index):
    arr = np.ascontiguousarray(x, dtype=np.float64)
    tail = arr.shape[1:]
    cdef Py_ssize_t c = 1
    for d in tail:
        c *= d
    cdef const double[:, ::1] src = arr.reshape(arr.shape[0], c)
    cdef const long long[::1] idx = np.ascontiguousarray(index, dtype=np.int64)
    cdef Py_ssize_t n = idx.shape[0], m = src.shape[0], i, j, k
    res = np.empty((n, c))
    cdef double[:, ::1] r = res
    for i in range(n):
        k = idx[i]
        if k < 0 or k >= m:
            raise IndexError("row index out of range")
        for j in range(c):
            r[i, j] = src[k, j]
    return res.reshape((n,) + tail)
