"""Min-cut kernels, split k-cut sequence, and the exhaustive oracle."""

import random

import numpy as np
import pytest

from hetplan._mincut_py import min_cut_kernel as py_kernel
from hetplan.partition import (
    ClusterGraph,
    PartitionError,
    build_cluster_graph,
    enumerate_bipartitions,
    exact_min_k_cut,
    make_partition,
    min_2cut,
    min_cut_kernel,
    split_min_k_cut_sequence,
)
from hetplan.workload import ClusterProfile, GpuDevice


def random_graph(rng, n, integer_weights=False):
    w = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            val = float(rng.randint(1, 100)) if integer_weights else rng.uniform(0.1, 100.0)
            w[i, j] = w[j, i] = val
    return ClusterGraph(vertices=tuple(f"g{i:02d}" for i in range(n)), weights=w)


def brute_force_min_2cut(graph):
    """Independent oracle: enumerate all proper bipartitions."""
    n = len(graph)
    best = None
    for side, rest in enumerate_bipartitions(n):
        total = 0.0
        for i in side:
            for j in rest:
                total += float(graph.weights[i, j])
        if best is None or total < best:
            best = total
    return best


class TestMin2Cut:
    def test_two_vertices(self):
        g = ClusterGraph(vertices=("a", "b"), weights=np.array([[0.0, 5.0], [5.0, 0.0]]))
        weight, (first, second) = min_2cut(g)
        assert weight == 5.0
        assert {first, second} == {frozenset({"a"}), frozenset({"b"})}

    def test_triangle_example(self):
        # w(a,b)=1, w(b,c)=2, w(a,c)=3: cheapest cut isolates b with weight 3.
        g = ClusterGraph(
            vertices=("a", "b", "c"),
            weights=np.array([[0, 1, 3], [1, 0, 2], [3, 2, 0]], dtype=float),
        )
        weight, (first, second) = min_2cut(g)
        assert weight == pytest.approx(3.0)
        assert {first, second} == {frozenset({"b"}), frozenset({"a", "c"})}

    def test_matches_brute_force_on_random_graphs(self):
        rng = random.Random(1234)
        for trial in range(60):
            n = rng.randint(2, 8)
            g = random_graph(rng, n)
            weight, _ = min_2cut(g)
            assert weight == pytest.approx(brute_force_min_2cut(g), rel=1e-9), f"trial {trial}"

    def test_cut_weight_matches_returned_partition(self):
        rng = random.Random(99)
        for _ in range(20):
            g = random_graph(rng, rng.randint(3, 7))
            weight, (first, second) = min_2cut(g)
            assert weight == pytest.approx(g.crossing_weight([first, second]), rel=1e-9)

    def test_deterministic_across_runs(self):
        rng = random.Random(5)
        g = random_graph(rng, 7)
        results = {(min_2cut(g)[0], min_2cut(g)[1]) for _ in range(5)}
        assert len(results) == 1

    def test_rejects_single_vertex(self):
        g = ClusterGraph(vertices=("a",), weights=np.zeros((1, 1)))
        with pytest.raises(PartitionError):
            min_2cut(g)


class TestKernelParity:
    def test_backends_bit_identical(self):
        # Whichever kernel partition.py selected must agree exactly with the
        # pure-python fallback, including tie-breaks.
        rng = random.Random(42)
        for _ in range(40):
            n = rng.randint(2, 12)
            g = random_graph(rng, n, integer_weights=rng.random() < 0.5)
            lex = g._lexrank
            w_a, side_a = min_cut_kernel(g.weights, lex)
            w_b, side_b = py_kernel(g.weights, lex)
            assert w_a == w_b  # bit-identical, no tolerance
            assert side_a == side_b


class TestSplitSequence:
    def test_k1_is_whole_vertex_set(self):
        rng = random.Random(3)
        g = random_graph(rng, 5)
        parts = split_min_k_cut_sequence(g, 1)
        assert len(parts) == 1
        assert parts[0].k == 1
        assert parts[0].groups == (frozenset(g.vertices),)
        assert parts[0].cut_weight == 0.0

    def test_full_sequence_ends_in_singletons(self):
        rng = random.Random(11)
        g = random_graph(rng, 6)
        parts = split_min_k_cut_sequence(g, 6)
        assert [p.k for p in parts] == [1, 2, 3, 4, 5, 6]
        assert all(len(grp) == 1 for grp in parts[-1].groups)
        assert parts[-1].cut_weight == pytest.approx(g.weights.sum() / 2, rel=1e-9)

    def test_cut_weight_nondecreasing(self):
        rng = random.Random(21)
        for _ in range(10):
            g = random_graph(rng, rng.randint(3, 9))
            parts = split_min_k_cut_sequence(g, len(g))
            weights = [p.cut_weight for p in parts]
            assert weights == sorted(weights)

    def test_stored_weight_is_canonical_crossing_weight(self):
        rng = random.Random(8)
        g = random_graph(rng, 7)
        for p in split_min_k_cut_sequence(g, 7):
            assert p.cut_weight == g.crossing_weight(p.groups)  # exact identity

    def test_k2_matches_min_2cut(self):
        rng = random.Random(17)
        for _ in range(10):
            g = random_graph(rng, rng.randint(2, 8))
            weight, sides = min_2cut(g)
            p2 = split_min_k_cut_sequence(g, 2)[1]
            assert p2.cut_weight == pytest.approx(weight, rel=1e-9)
            assert set(p2.groups) == set(sides)

    def test_two_clique_graph_splits_along_weak_link(self):
        # Two 3-cliques of weight 100 joined by weight-1 edges: k=2 must
        # separate the cliques.
        n = 6
        w = np.ones((n, n)) * 1.0
        for block in (range(0, 3), range(3, 6)):
            for i in block:
                for j in block:
                    if i != j:
                        w[i, j] = 100.0
        np.fill_diagonal(w, 0.0)
        g = ClusterGraph(vertices=tuple(f"g{i}" for i in range(n)), weights=w)
        p2 = split_min_k_cut_sequence(g, 2)[1]
        assert set(p2.groups) == {frozenset({"g0", "g1", "g2"}), frozenset({"g3", "g4", "g5"})}

    def test_deterministic(self):
        rng = random.Random(77)
        g = random_graph(rng, 8)
        a = split_min_k_cut_sequence(g, 8)
        b = split_min_k_cut_sequence(g, 8)
        for pa, pb in zip(a, b):
            assert pa.groups == pb.groups and pa.cut_weight == pb.cut_weight

    def test_bad_k_max(self):
        rng = random.Random(1)
        g = random_graph(rng, 4)
        with pytest.raises(PartitionError):
            split_min_k_cut_sequence(g, 0)
        with pytest.raises(PartitionError):
            split_min_k_cut_sequence(g, 5)


class TestExactMinKCut:
    def test_k1_and_kn(self):
        rng = random.Random(2)
        g = random_graph(rng, 5)
        p1 = exact_min_k_cut(g, 1)
        assert p1.cut_weight == 0.0
        pn = exact_min_k_cut(g, 5)
        assert pn.cut_weight == pytest.approx(g.weights.sum() / 2, rel=1e-9)

    def test_triangle_k2(self):
        g = ClusterGraph(
            vertices=("a", "b", "c"),
            weights=np.array([[0, 1, 3], [1, 0, 2], [3, 2, 0]], dtype=float),
        )
        p = exact_min_k_cut(g, 2)
        assert p.cut_weight == pytest.approx(3.0)
        assert frozenset({"b"}) in p.groups

    def test_matches_bipartition_enumeration_at_k2(self):
        rng = random.Random(31)
        for _ in range(15):
            g = random_graph(rng, rng.randint(2, 7))
            assert exact_min_k_cut(g, 2).cut_weight == pytest.approx(
                brute_force_min_2cut(g), rel=1e-12
            )

    def test_size_limit(self):
        rng = random.Random(4)
        g = random_graph(rng, 11)
        with pytest.raises(PartitionError, match="enumeration"):
            exact_min_k_cut(g, 2)


class TestBuildClusterGraph:
    def make_profile(self):
        devices = (
            GpuDevice("gpu0", "t4", 65, 16 << 30, "n0", "r0"),
            GpuDevice("gpu1", "t4", 65, 16 << 30, "n0", "r0"),
            GpuDevice("gpu2", "v100", 125, 16 << 30, "n1", "r1"),
        )
        return ClusterProfile(
            devices=devices,
            intra_node_bw={"n0": 6.1e9, "n1": 23.9e9},
            inter_node_bw={("n0", "n1"): 2.69e9},
            runtime_samples={},
        )

    def test_weights_from_bandwidths(self):
        g = build_cluster_graph(self.make_profile())
        assert g.edge_weight("gpu0", "gpu1") == pytest.approx(6.1e9)
        assert g.edge_weight("gpu0", "gpu2") == pytest.approx(2.69e9)
        assert g.edge_weight("gpu1", "gpu2") == pytest.approx(2.69e9)

    def test_complete_and_symmetric(self):
        g = build_cluster_graph(self.make_profile())
        n = len(g)
        for i in range(n):
            for j in range(n):
                if i != j:
                    assert g.weights[i, j] > 0
                    assert g.weights[i, j] == g.weights[j, i]
        assert np.all(np.diag(g.weights) == 0)


class TestMakePartition:
    def test_groups_ordered_by_min_member(self):
        rng = random.Random(6)
        g = random_graph(rng, 5)
        p = make_partition(g, [frozenset({"g03", "g04"}), frozenset({"g00", "g01", "g02"})])
        assert p.groups[0] == frozenset({"g00", "g01", "g02"})

    def test_rejects_incomplete_cover(self):
        rng = random.Random(6)
        g = random_graph(rng, 4)
        with pytest.raises(PartitionError):
            make_partition(g, [frozenset({"g00"})])
