# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled minimum 2-cut kernel: Stoer-Wagner phases in typed loops.

Mirrors ``_mincut_py.min_cut_kernel`` operation-for-operation (same float
additions in the same order, same tie rules) so the two backends are
bit-identical and interchangeable.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def min_cut_kernel(weights, lexrank):
    """Global minimum 2-cut; see the pure-python twin for the contract."""
    cdef cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] w = np.array(
        weights, dtype=np.float64, order="C", copy=True
    )
    cdef Py_ssize_t n = w.shape[0]
    if n < 2:
        raise ValueError("min cut needs >= 2 vertices")
    cdef cnp.ndarray[cnp.int64_t, ndim=1] minid = np.array(
        lexrank, dtype=np.int64, copy=True
    )
    cdef cnp.ndarray[cnp.uint8_t, ndim=1] active = np.ones(n, dtype=np.uint8)
    cdef cnp.ndarray[cnp.uint8_t, ndim=1] in_a = np.zeros(n, dtype=np.uint8)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] conn = np.zeros(n, dtype=np.float64)

    members = [[i] for i in range(n)]

    cdef double best_w = np.inf
    best_side = []

    cdef Py_ssize_t n_active = n
    cdef Py_ssize_t i, j, start, sel, prev, last, step
    cdef double cut_val, top
    while n_active > 1:
        # Phase start: active slot with the smallest lexicographic rank.
        start = -1
        for i in range(n):
            if active[i] and (start < 0 or minid[i] < minid[start]):
                start = i
        for i in range(n):
            in_a[i] = 0
            conn[i] = w[start, i]
        in_a[start] = 1
        prev = start
        last = start
        cut_val = 0.0
        for step in range(n_active - 1):
            sel = -1
            top = 0.0
            for j in range(n):
                if active[j] and not in_a[j]:
                    if sel < 0 or conn[j] > top or (conn[j] == top and minid[j] < minid[sel]):
                        sel = j
                        top = conn[j]
            cut_val = conn[sel]
            prev = last
            last = sel
            in_a[sel] = 1
            for j in range(n):
                if active[j] and not in_a[j]:
                    conn[j] += w[sel, j]
        if cut_val < best_w:
            best_w = cut_val
            best_side = list(members[last])
        # Merge last into prev (the second-to-last vertex of the phase).
        for j in range(n):
            w[prev, j] += w[last, j]
        w[prev, prev] = 0.0
        w[prev, last] = 0.0
        for j in range(n):
            w[j, prev] = w[prev, j]
        active[last] = 0
        members[prev].extend(members[last])
        if minid[last] < minid[prev]:
            minid[prev] = minid[last]
        n_active -= 1
    return float(best_w), sorted(best_side)
