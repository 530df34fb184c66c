# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled Gaussian-kernel sums for the MMD statistic."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp

cnp.import_array()


def rbf_sum(double[:, ::1] a, double[:, ::1] b, double gamma, bint exclude_diagonal=False):
    """sum_{i,j} exp(-gamma * |a_i - b_j|^2), skipping i == j if asked."""
    cdef Py_ssize_t m = a.shape[0], n = b.shape[0], d = a.shape[1]
    cdef Py_ssize_t i, j, k
    cdef double total = 0.0, row, dist, diff
    if b.shape[1] != d:
        raise ValueError("dimension mismatch")
    with nogil:
        for i in range(m):
            row = 0.0
            for j in range(n):
                if exclude_diagonal and i == j:
                    continue
                dist = 0.0
                for k in range(d):
                    diff = a[i, k] - b[j, k]
                    dist = dist + diff * diff
                row = row + exp(-gamma * dist)
            total = total + row
    return total


def pairwise_sq_dists(double[:, ::1] a):
    """Condensed upper-triangle squared distances, row-major (i < j)."""
    cdef Py_ssize_t n = a.shape[0], d = a.shape[1]
    cdef Py_ssize_t i, j, k, pos = 0
    cdef double dist, diff
    out_arr = np.empty(n * (n - 1) // 2, dtype=np.float64)
    cdef double[::1] out = out_arr
    with nogil:
        for i in range(n):
            for j in range(i + 1, n):
                dist = 0.0
                for k in range(d):
                    diff = a[i, k] - a[j, k]
                    dist = dist + diff * diff
                out[pos] = dist
                pos = pos + 1
    return out_arr
