"""Cluster-graph construction and minimum-k-cut partitioning.

Phase 1 of planning: model the cluster as a complete weighted graph (edge
weight = link bandwidth between the two GPUs) and peel it into k groups whose
crossing bandwidth is minimal, so data-parallel collectives stay on fast
links.  The k-cut is built by repeated global minimum 2-cuts (the classic
split heuristic, within a factor 2 - 2/k of optimal); each 2-cut runs
Stoer-Wagner maximum-adjacency phases, which is the hot loop and lives in a
compiled kernel with a numpy fallback selected at import.

``exact_min_k_cut`` enumerates set partitions for small graphs and exists to
oracle-check the heuristic.
"""

from __future__ import annotations

import itertools
import os
from dataclasses import dataclass
from typing import Dict, FrozenSet, List, Sequence, Tuple

import numpy as np

from .workload import ClusterProfile

if os.environ.get("HETPLAN_PURE_PYTHON"):
    from ._mincut_py import min_cut_kernel

    MINCUT_BACKEND = "python"
else:
    try:
        from ._mincut_c import min_cut_kernel  # type: ignore[no-redef]

        MINCUT_BACKEND = "compiled"
    except ImportError:  # pragma: no cover - depends on build environment
        from ._mincut_py import min_cut_kernel  # type: ignore[no-redef]

        MINCUT_BACKEND = "python"

EXACT_ENUMERATION_LIMIT = 10


class PartitionError(ValueError):
    """Raised for invalid partitioning requests."""


@dataclass
class ClusterGraph:
    """Complete weighted graph over devices; weights are link bandwidths."""

    vertices: Tuple[str, ...]
    weights: np.ndarray  # (n, n) float64, symmetric, zero diagonal

    def __post_init__(self) -> None:
        n = len(self.vertices)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.shape != (n, n):
            raise PartitionError("weight matrix shape does not match vertex count")
        if len(set(self.vertices)) != n:
            raise PartitionError("duplicate vertex ids")
        # Rank of each slot in lexicographic vertex-id order, for tie-breaks.
        order = sorted(range(n), key=lambda i: self.vertices[i])
        self._lexrank = np.zeros(n, dtype=np.int64)
        for rank, slot in enumerate(order):
            self._lexrank[slot] = rank
        self._index = {v: i for i, v in enumerate(self.vertices)}
        # Memo tables for repeated cost-model queries over the same device
        # sets (candidate sweeps reuse a handful of groups thousands of times).
        self._minbw_cache: dict = {}
        self._crosslink_cache: dict = {}

    def __len__(self) -> int:
        return len(self.vertices)

    def index_of(self, vertex: str) -> int:
        return self._index[vertex]

    def edge_weight(self, u: str, v: str) -> float:
        return float(self.weights[self._index[u], self._index[v]])

    def crossing_weight(self, groups: Sequence[FrozenSet[str]]) -> float:
        """Total weight of edges with endpoints in different groups.

        Canonical accumulation order (i < j over slot indices) so the result
        is reproducible and usable as the stored cut weight.
        """
        label = {}
        for gi, group in enumerate(groups):
            for v in group:
                label[self._index[v]] = gi
        n = len(self.vertices)
        total = 0.0
        for i in range(n):
            for j in range(i + 1, n):
                if label[i] != label[j]:
                    total += float(self.weights[i, j])
        return total


@dataclass(frozen=True)
class Partition:
    """k groups of device ids plus the crossing (cut) weight."""

    k: int
    groups: Tuple[FrozenSet[str], ...]
    cut_weight: float

    def __post_init__(self) -> None:
        if self.k != len(self.groups):
            raise PartitionError("k does not match number of groups")
        if any(not g for g in self.groups):
            raise PartitionError("empty group in partition")
        all_ids = [v for g in self.groups for v in g]
        if len(all_ids) != len(set(all_ids)):
            raise PartitionError("groups are not disjoint")

    def group_of(self, vertex: str) -> int:
        for gi, group in enumerate(self.groups):
            if vertex in group:
                return gi
        raise KeyError(vertex)


def _ordered_groups(groups: Sequence[FrozenSet[str]]) -> Tuple[FrozenSet[str], ...]:
    return tuple(sorted((frozenset(g) for g in groups), key=lambda g: min(g)))


def make_partition(graph: ClusterGraph, groups: Sequence[FrozenSet[str]]) -> Partition:
    """Partition with deterministically ordered groups and recomputed cut weight."""
    ordered = _ordered_groups(groups)
    covered = {v for g in ordered for v in g}
    if covered != set(graph.vertices):
        raise PartitionError("groups do not cover the vertex set exactly")
    return Partition(k=len(ordered), groups=ordered, cut_weight=graph.crossing_weight(ordered))


def build_cluster_graph(profile: ClusterProfile) -> ClusterGraph:
    """Complete graph over the profile's devices weighted by pairwise bandwidth."""
    n = len(profile.devices)
    w = np.zeros((n, n), dtype=np.float64)
    for i in range(n):
        for j in range(i + 1, n):
            bw = profile.bandwidth(profile.devices[i], profile.devices[j])
            w[i, j] = w[j, i] = bw
    return ClusterGraph(vertices=tuple(d.id for d in profile.devices), weights=w)


def _component_min_2cut(
    graph: ClusterGraph, component: Tuple[int, ...]
) -> Tuple[float, Tuple[int, ...], Tuple[int, ...]]:
    """Min 2-cut of the induced subgraph on ``component`` (slot indices).

    Split never removes edges inside a surviving component, so the induced
    weights always come straight from the original matrix.
    """
    sub = graph.weights[np.ix_(component, component)]
    lex = graph._lexrank[list(component)]
    weight, side_local = min_cut_kernel(sub, lex)
    side = tuple(component[i] for i in side_local)
    rest = tuple(i for i in component if i not in set(side))
    return weight, side, rest


def min_2cut(graph: ClusterGraph) -> Tuple[float, Tuple[FrozenSet[str], FrozenSet[str]]]:
    """Global minimum 2-cut of the whole graph.

    Deterministic under a fixed vertex order; ties break toward the smallest
    lexicographic vertex id during the maximum-adjacency phases.
    """
    if len(graph) < 2:
        raise PartitionError("min 2-cut needs >= 2 vertices")
    all_slots = tuple(range(len(graph)))
    weight, side, rest = _component_min_2cut(graph, all_slots)
    side_ids = frozenset(graph.vertices[i] for i in side)
    rest_ids = frozenset(graph.vertices[i] for i in rest)
    first, second = sorted((side_ids, rest_ids), key=min)
    return float(weight), (first, second)


def split_min_k_cut_sequence(graph: ClusterGraph, k_max: int) -> List[Partition]:
    """Partitions for every k in 1..k_max from one split run.

    Repeatedly removes the cheapest minimum 2-cut among current components
    (ties toward the component containing the smallest vertex id).  Cut
    weights are nondecreasing in k and each stored weight is the canonical
    crossing weight of the original graph.
    """
    n = len(graph)
    if not 1 <= k_max <= n:
        raise PartitionError(f"k_max must be in 1..{n}, got {k_max}")

    components: List[Tuple[int, ...]] = [tuple(range(n))]
    cut_cache: Dict[Tuple[int, ...], Tuple[float, Tuple[int, ...], Tuple[int, ...]]] = {}

    def groups_now() -> List[FrozenSet[str]]:
        return [frozenset(graph.vertices[i] for i in comp) for comp in components]

    out = [make_partition(graph, groups_now())]
    for _ in range(k_max - 1):
        best_comp = None
        best = None
        for comp in components:
            if len(comp) < 2:
                continue
            if comp not in cut_cache:
                cut_cache[comp] = _component_min_2cut(graph, comp)
            cand = cut_cache[comp]
            comp_key = min(graph.vertices[i] for i in comp)
            if best is None or (cand[0], comp_key) < best:
                best = (cand[0], comp_key)
                best_comp = comp
        if best_comp is None:
            raise PartitionError("no splittable component left")  # pragma: no cover
        _, side, rest = cut_cache[best_comp]
        components.remove(best_comp)
        components.extend([side, rest])
        out.append(make_partition(graph, groups_now()))
    return out


def _set_partitions_exact_k(n: int, k: int):
    """Canonical (restricted-growth) set partitions of range(n) into exactly k blocks."""
    assign = [0] * n

    def rec(i: int, used: int):
        remaining = n - i
        if used + remaining < k:
            return
        if i == n:
            if used == k:
                yield list(assign)
            return
        for block in range(min(used + 1, k)):
            assign[i] = block
            yield from rec(i + 1, used + (1 if block == used else 0))

    yield from rec(0, 0)


def exact_min_k_cut(graph: ClusterGraph, k: int) -> Partition:
    """Exhaustive minimum k-cut over set partitions; oracle for small graphs."""
    n = len(graph)
    if n > EXACT_ENUMERATION_LIMIT:
        raise PartitionError(
            f"exact enumeration limited to {EXACT_ENUMERATION_LIMIT} vertices, got {n}"
        )
    if not 1 <= k <= n:
        raise PartitionError(f"k must be in 1..{n}, got {k}")
    w = graph.weights
    best_weight = None
    best_assign = None
    for assign in _set_partitions_exact_k(n, k):
        total = 0.0
        for i in range(n):
            for j in range(i + 1, n):
                if assign[i] != assign[j]:
                    total += float(w[i, j])
        if best_weight is None or total < best_weight:
            best_weight = total
            best_assign = assign
    groups: List[set] = [set() for _ in range(k)]
    for slot, block in enumerate(best_assign):  # type: ignore[arg-type]
        groups[block].add(graph.vertices[slot])
    return make_partition(graph, [frozenset(g) for g in groups])


def enumerate_bipartitions(n: int):
    """All proper bipartitions of range(n) as (sideA, sideB); brute-force helper."""
    slots = tuple(range(n))
    for size in range(1, n // 2 + 1):
        for side in itertools.combinations(slots, size):
            rest = tuple(i for i in slots if i not in side)
            if size == n - size and side[0] != 0:
                continue  # avoid double-counting equal halves
            yield side, rest
