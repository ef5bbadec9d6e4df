# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels: symmetric InfoNCE forward pass and stable top-k hit test."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log

cnp.import_array()


def info_nce_loss(queries, keys, double tau):
    # the product goes through BLAS; the fused row/column log-sum-exp stays here
    logits = np.ascontiguousarray(queries, dtype=np.float64) @ np.ascontiguousarray(keys, dtype=np.float64).T
    logits /= tau
    cdef double[:, ::1] s = logits
    cdef Py_ssize_t n = s.shape[0], i, j
    cdef double acc, m, total = 0.0, diag_sum = 0.0
    for i in range(n):
        diag_sum += s[i, i]
    for i in range(n):
        m = s[i, 0]
        for j in range(1, n):
            if s[i, j] > m:
                m = s[i, j]
        acc = 0.0
        for j in range(n):
            acc += exp(s[i, j] - m)
        total += m + log(acc)
    for j in range(n):
        m = s[0, j]
        for i in range(1, n):
            if s[i, j] > m:
                m = s[i, j]
        acc = 0.0
        for i in range(n):
            acc += exp(s[i, j] - m)
        total += m + log(acc)
    return 0.5 * (total - 2.0 * diag_sum) / n


def topk_hits(sim, correct, int k):
    cdef double[:, ::1] s = np.ascontiguousarray(sim, dtype=np.float64)
    cdef cnp.uint8_t[:, ::1] ok = np.ascontiguousarray(correct, dtype=np.uint8)
    cdef Py_ssize_t n = s.shape[0], m = s.shape[1], i, j, r
    cdef Py_ssize_t rank
    out = np.zeros(n, dtype=bool)
    cdef cnp.uint8_t[::1] hit = out.view(np.uint8)
    cdef double v
    for i in range(n):
        for j in range(m):
            if not ok[i, j]:
                continue
            # rank of column j: columns strictly better, or equal with a lower index
            v = s[i, j]
            rank = 0
            for r in range(m):
                if s[i, r] > v or (s[i, r] == v and r < j):
                    rank += 1
                    if rank >= k:
                        break
            if rank < k:
                hit[i] = 1
                break
    return out
