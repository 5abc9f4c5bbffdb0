"""Pure-numpy minimum 2-cut kernel (fallback for the compiled extension).

Stoer-Wagner maximum-adjacency phases on a dense symmetric weight matrix.
Ties (phase start vertex, most-tightly-connected selection) break toward the
smallest lexicographic original vertex id, carried here as an integer rank per
slot so merged supervertices inherit the smallest rank of their members.

The compiled twin in ``_mincut_c.pyx`` performs the same arithmetic in the
same order, so both kernels return bit-identical cut weights and sides.
"""

from __future__ import annotations

from typing import List, Tuple

import numpy as np


def min_cut_kernel(weights: np.ndarray, lexrank: np.ndarray) -> Tuple[float, List[int]]:
    """Global minimum 2-cut of the graph given by ``weights``.

    ``weights`` is an (n, n) float64 symmetric matrix with zero diagonal
    (absent edges are weight 0); it is consumed destructively.  ``lexrank``
    holds each slot's rank in the lexicographic order of vertex ids.

    Returns ``(weight, side)`` where ``side`` is the sorted list of slot
    indices on one shore of the best cut.
    """
    w = np.array(weights, dtype=np.float64, copy=True)
    n = w.shape[0]
    if n < 2:
        raise ValueError("min cut needs >= 2 vertices")
    minid = np.array(lexrank, dtype=np.int64, copy=True)
    active = np.ones(n, dtype=bool)
    members: List[List[int]] = [[i] for i in range(n)]

    best_w = np.inf
    best_side: List[int] = []
    n_active = n
    while n_active > 1:
        act = np.flatnonzero(active)
        start = act[np.argmin(minid[act])]
        in_a = np.zeros(n, dtype=bool)
        in_a[start] = True
        conn = w[start].copy()
        prev = start
        last = start
        cut_val = 0.0
        for _ in range(n_active - 1):
            cand = active & ~in_a
            cvals = np.where(cand, conn, -np.inf)
            top = cvals.max()
            ties = np.flatnonzero(cand & (cvals == top))
            sel = ties[np.argmin(minid[ties])]
            cut_val = conn[sel]
            prev = last
            last = sel
            in_a[sel] = True
            conn += w[sel]
        if cut_val < best_w:
            best_w = float(cut_val)
            best_side = list(members[last])
        # Merge last into prev (the second-to-last vertex of the phase).
        w[prev, :] += w[last, :]
        w[prev, prev] = 0.0
        w[prev, last] = 0.0
        w[:, prev] = w[prev, :]
        active[last] = False
        members[prev].extend(members[last])
        if minid[last] < minid[prev]:
            minid[prev] = minid[last]
        n_active -= 1
    return float(best_w), sorted(best_side)
