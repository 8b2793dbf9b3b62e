# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops: row-wise masked softmax and edit-distance alignment."""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, INFINITY


def masked_softmax_forward(const double[:, ::1] x, const unsigned char[:, ::1] mask):
    cdef Py_ssize_t rows = x.shape[0], cols = x.shape[1], mrows = mask.shape[0]
    cdef Py_ssize_t i, j, mi
    cdef double m, s, e, inv
    cdef int bad = -1
    out = np.zeros((rows, cols), dtype=np.float64)
    cdef double[:, ::1] y = out
    if mask.shape[1] != cols:
        raise ValueError("mask width does not match logits")
    with nogil:
        for i in range(rows):
            mi = i % mrows
            m = -INFINITY
            for j in range(cols):
                if mask[mi, j] and x[i, j] > m:
                    m = x[i, j]
            if m == -INFINITY:
                bad = <int>i
                break
            s = 0.0
            for j in range(cols):
                if mask[mi, j]:
                    e = exp(x[i, j] - m)
                    y[i, j] = e
                    s += e
            inv = 1.0 / s
            for j in range(cols):
                y[i, j] *= inv
    if bad >= 0:
        raise ValueError(f"row {bad} of the attention mask has no allowed entry")
    return out


def masked_softmax_backward(const double[:, ::1] y, const double[:, ::1] gy):
    cdef Py_ssize_t rows = y.shape[0], cols = y.shape[1]
    cdef Py_ssize_t i, j
    cdef double dot
    out = np.empty((rows, cols), dtype=np.float64)
    cdef double[:, ::1] gx = out
    with nogil:
        for i in range(rows):
            dot = 0.0
            for j in range(cols):
                dot += y[i, j] * gy[i, j]
            for j in range(cols):
                gx[i, j] = y[i, j] * (gy[i, j] - dot)
    return out


def edit_ops(const cnp.int64_t[::1] ref, const cnp.int64_t[::1] hyp):
    """Return (substitutions, deletions, insertions) of one minimal alignment."""
    cdef Py_ssize_t n = ref.shape[0], m = hyp.shape[0]
    cdef Py_ssize_t i, j
    cdef long long sub, dele, ins, best
    table = np.empty((n + 1, m + 1), dtype=np.int64)
    cdef long long[:, ::1] d = table
    cdef long long s = 0, dl = 0, it = 0
    with nogil:
        for i in range(n + 1):
            d[i, 0] = i
        for j in range(m + 1):
            d[0, j] = j
        for i in range(1, n + 1):
            for j in range(1, m + 1):
                sub = d[i - 1, j - 1] + (0 if ref[i - 1] == hyp[j - 1] else 1)
                dele = d[i - 1, j] + 1
                ins = d[i, j - 1] + 1
                best = sub
                if dele < best:
                    best = dele
                if ins < best:
                    best = ins
                d[i, j] = best
        i = n
        j = m
        while i > 0 or j > 0:
            if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (0 if ref[i - 1] == hyp[j - 1] else 1):
                if ref[i - 1] != hyp[j - 1]:
                    s += 1
                i -= 1
                j -= 1
            elif i > 0 and d[i, j] == d[i - 1, j] + 1:
                dl += 1
                i -= 1
            else:
                it += 1
                j -= 1
    return s, dl, it
