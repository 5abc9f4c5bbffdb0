"""Tests for plan construction heuristics and plan-file round trips."""

import itertools
import json
import random

import pytest

from hetplan.configure import (
    GpuGroup,
    NoFeasiblePlanError,
    PlanFormatError,
    TrainingPlan,
    balance_microbatch,
    cluster_fingerprint,
    make_ministages,
    order_groups,
    partition_layers,
    plan_training,
    proportional_split,
    route_microbatches,
)
from hetplan.costs import Strategy
from hetplan.workload import (
    ClusterProfile,
    GpuDevice,
    LayerFit,
    LayerRuntimeModel,
    ModelSpec,
    WorkloadSpec,
    fit_runtime_model,
)


def device(i, kind="a100", node="n0", region="r0", mem=16_000_000_000):
    return GpuDevice(id=f"{kind}-{i}", kind=kind, peak_tflops=100.0,
                     mem_capacity=mem, node_id=node, region_id=region)


def runtime(**kind_fits):
    return LayerRuntimeModel(
        fits={(kind, "transformer"): fit for kind, fit in kind_fits.items()}
    )


class TestProportionalSplit:
    def test_exact_proportions(self):
        assert proportional_split(20, [2, 2, 1]) == [8, 8, 4]

    def test_remainder_ties_go_to_earlier_slots(self):
        assert proportional_split(20, [1, 1, 1]) == [7, 7, 6]

    def test_minimum_per_slot(self):
        assert proportional_split(20, [2, 2, 1], min_each=1) == [8, 8, 4]
        assert proportional_split(5, [100, 1, 1], min_each=1) == [3, 1, 1]

    def test_zero_weights_fall_back_to_even(self):
        assert proportional_split(9, [0, 0, 0]) == [3, 3, 3]

    def test_heavier_weight_never_gets_fewer(self):
        rng = random.Random(7)
        for _ in range(200):
            n = rng.randint(2, 6)
            weights = [rng.uniform(0.1, 10.0) for _ in range(n)]
            total = rng.randint(n, 40)
            out = proportional_split(total, weights, min_each=1)
            assert sum(out) == total
            for i in range(n):
                for j in range(n):
                    if weights[i] >= weights[j]:
                        assert out[i] >= out[j] or weights[i] == weights[j]

    def test_errors(self):
        with pytest.raises(ValueError):
            proportional_split(2, [1, 1, 1], min_each=1)
        with pytest.raises(ValueError):
            proportional_split(5, [])
        with pytest.raises(ValueError):
            proportional_split(5, [1, -1])


class TestPartitionLayers:
    def test_speed_proportional(self):
        assert partition_layers([2.0, 2.0, 1.0], 20) == [8, 8, 4]

    def test_every_group_gets_a_layer(self):
        assert partition_layers([100.0, 1.0], 2) == [1, 1]


class TestMakeMinistages:
    def test_even(self):
        assert make_ministages(8, 4) == (2, 2, 2, 2)

    def test_remainder_to_earliest(self):
        assert make_ministages(5, 2) == (3, 2)
        assert make_ministages(7, 3) == (3, 2, 2)

    def test_degenerate(self):
        assert make_ministages(5, 1) == (5,)
        assert make_ministages(5, 5) == (1, 1, 1, 1, 1)

    def test_bounds(self):
        with pytest.raises(ValueError):
            make_ministages(3, 4)
        with pytest.raises(ValueError):
            make_ministages(3, 0)


def group_of(devices, intra_bw, shares=None):
    shares = shares or {d.id: 1 for d in devices}
    n = sum(shares.values())
    return GpuGroup(devices=tuple(devices), layers_assigned=1,
                    ministage_sizes=(1,), shares=shares,
                    aggregate_speed=1.0, intra_bw=intra_bw)


class TestOrderGroups:
    def test_fastest_interconnect_first(self):
        a = group_of([device(0, node="n0"), device(1, node="n0")], 10e9)
        b = group_of([device(2, node="n1"), device(3, node="n1")], 25e9)
        assert order_groups([a, b]) == [b, a]

    def test_single_device_group_sorts_first(self):
        a = group_of([device(0), device(1)], 25e9)
        b = group_of([device(5)], float("inf"))
        assert order_groups([a, b]) == [b, a]

    def test_tie_breaks_on_device_id(self):
        a = group_of([device(3)], float("inf"))
        b = group_of([device(1)], float("inf"))
        assert order_groups([a, b]) == [b, a]


class TestBalanceMicrobatch:
    def test_two_to_one_speed_ratio(self):
        devs = [device(0, kind="fast"), device(1, kind="slow")]
        rt = runtime(
            fast=LayerFit(0.0, 0.002, 0.0, 0.004),
            slow=LayerFit(0.0, 0.004, 0.0, 0.008),
        )
        assert balance_microbatch(devs, rt, 12) == {"fast-0": 8, "slow-1": 4}

    def test_equal_devices_split_evenly(self):
        devs = [device(i) for i in range(4)]
        rt = runtime(a100=LayerFit(0.001, 0.002, 0.002, 0.004))
        shares = balance_microbatch(devs, rt, 8)
        assert sorted(shares.values()) == [2, 2, 2, 2]

    def test_matches_exhaustive_minimax(self):
        rng = random.Random(11)
        for trial in range(40):
            n = rng.randint(2, 3)
            kinds = []
            fits = {}
            for i in range(n):
                kind = f"k{trial}_{i}"
                kinds.append(kind)
                fits[kind] = LayerFit(
                    fwd_alpha=rng.uniform(0.0, 0.002),
                    fwd_beta=rng.uniform(0.001, 0.01),
                    bwd_alpha=rng.uniform(0.0, 0.004),
                    bwd_beta=rng.uniform(0.002, 0.02),
                )
            devs = [
                GpuDevice(id=f"d{i}", kind=kinds[i], peak_tflops=1.0,
                          mem_capacity=1, node_id="n0", region_id="r0")
                for i in range(n)
            ]
            rt = LayerRuntimeModel(
                fits={(k, "transformer"): f for k, f in fits.items()}
            )
            size = rng.randint(1, 12)

            def time_of(kind, s):
                if s <= 0:
                    return 0.0
                f = fits[kind]
                return f.fwd_alpha + f.bwd_alpha + (f.fwd_beta + f.bwd_beta) * s

            best = min(
                max(time_of(kinds[i], combo[i]) for i in range(n))
                for combo in itertools.product(range(size + 1), repeat=n)
                if sum(combo) == size
            )
            shares = balance_microbatch(devs, rt, size)
            achieved = max(time_of(kinds[i], shares[f"d{i}"]) for i in range(n))
            assert sum(shares.values()) == size
            assert achieved == pytest.approx(best, rel=1e-9), (
                f"trial {trial}: got {achieved}, optimum {best}, shares {shares}"
            )

    def test_rejects_empty_microbatch(self):
        with pytest.raises(ValueError):
            balance_microbatch([device(0)], runtime(a100=LayerFit(0, 1, 0, 1)), 0)


class TestRouteMicrobatches:
    def test_constant_shares_every_microbatch(self):
        routed = route_microbatches({"a": 2, "b": 1}, 3, {"a": 1.0, "b": 2.0})
        assert len(routed) == 3
        for mb in routed:
            assert sorted(mb) == [("a", 2), ("b", 1)]

    def test_most_loaded_device_listed_first(self):
        routed = route_microbatches({"a": 1, "b": 1}, 2, {"a": 5.0, "b": 1.0})
        assert routed[0][0][0] == "a"

    def test_zero_share_devices_omitted(self):
        routed = route_microbatches({"a": 3, "b": 0}, 2, {"a": 1.0, "b": 1.0})
        for mb in routed:
            assert mb == [("a", 3)]

    def test_matches_exhaustive_assignment_on_divisible_instance(self):
        # Two devices at a 2:1 rate with shares 2:1 per microbatch: the
        # per-microbatch makespan equals the best atomic assignment of the
        # 3 samples found by brute force.
        per_sample = {"fast": 1.0, "slow": 2.0}
        shares = {"fast": 2, "slow": 1}
        routed = route_microbatches(shares, 3, per_sample)
        makespan = max(n * per_sample[dev] for mb in routed for dev, n in mb)
        brute = min(
            max(a * per_sample["fast"], (3 - a) * per_sample["slow"])
            for a in range(4)
        )
        assert makespan == brute == 2.0

    def test_deterministic(self):
        args = ({"a": 2, "b": 2, "c": 1}, 4, {"a": 1.0, "b": 1.0, "c": 3.0})
        assert route_microbatches(*args) == route_microbatches(*args)


class TestPlanGeometry:
    def make_plan(self, sizes_per_group):
        groups = []
        for gi, sizes in enumerate(sizes_per_group):
            devs = (device(gi * 10, node=f"n{gi}"),)
            groups.append(GpuGroup(
                devices=devs, layers_assigned=sum(sizes),
                ministage_sizes=tuple(sizes), shares={devs[0].id: 4},
                aggregate_speed=1.0, intra_bw=float("inf"),
            ))
        return TrainingPlan(groups=tuple(groups), n_microbatches=2,
                            microbatch_size=4, strategy=Strategy.INTERLEAVED,
                            cluster_fingerprint="x")

    def test_round_robin_global_order(self):
        plan = self.make_plan([(2, 2), (3, 3)])
        assert plan.global_order() == [(0, 0), (1, 0), (0, 1), (1, 1)]

    def test_exhausted_groups_are_skipped_in_later_rounds(self):
        plan = self.make_plan([(2, 2, 2), (5,)])
        assert plan.global_order() == [(0, 0), (1, 0), (0, 1), (0, 2)]

    def test_layers_dealt_contiguously_along_global_order(self):
        plan = self.make_plan([(2, 2), (3, 3)])
        assert plan.stage_layer_ranges() == [(0, 2), (2, 5), (5, 7), (7, 10)]

    def test_share_sum_must_match_microbatch_size(self):
        with pytest.raises(PlanFormatError):
            devs = (device(0),)
            TrainingPlan(
                groups=(GpuGroup(devices=devs, layers_assigned=2,
                                 ministage_sizes=(2,), shares={devs[0].id: 3},
                                 aggregate_speed=1.0, intra_bw=float("inf")),),
                n_microbatches=2, microbatch_size=4,
                strategy=Strategy.INTERLEAVED, cluster_fingerprint="x",
            )

    def test_ministage_sizes_must_cover_layers(self):
        with pytest.raises(PlanFormatError):
            GpuGroup(devices=(device(0),), layers_assigned=5,
                     ministage_sizes=(2, 2), shares={"a100-0": 1},
                     aggregate_speed=1.0, intra_bw=1e9)


def small_profile():
    devices = (
        device(0, kind="a100", node="n0"),
        device(1, kind="a100", node="n0"),
        device(2, kind="t4", node="n1"),
    )
    samples = {
        ("a100", "transformer"): [(1, 0.003, 0.006), (2, 0.005, 0.010),
                                  (4, 0.009, 0.018)],
        ("t4", "transformer"): [(1, 0.005, 0.010), (2, 0.009, 0.018),
                                (4, 0.017, 0.034)],
    }
    return ClusterProfile(
        devices=devices,
        intra_node_bw={"n0": 25e9, "n1": 20e9},
        inter_node_bw={("n0", "n1"): 5e9},
        runtime_samples=samples,
    )


def small_inputs():
    profile = small_profile()
    model = ModelSpec.uniform(6, 200_000, hidden_size=512, bytes_per_element=2)
    workload = WorkloadSpec(global_batch=8, seq_len=256)
    return profile, model, workload, fit_runtime_model(profile)


class TestPlanTraining:
    def test_produces_feasible_plan(self):
        profile, model, workload, rt = small_inputs()
        plan, records = plan_training(profile, model, workload, rt)
        assert plan.num_layers == 6
        assert plan.n_microbatches * plan.microbatch_size == 8
        assert records
        assert any(r.feasible for r in records)
        covered = sorted(d for g in plan.groups for d in g.device_ids)
        assert covered == sorted(d.id for d in profile.devices)
        assert plan.latency is not None and plan.latency.l_total > 0
        assert plan.memory is not None and len(plan.memory) == 3
        assert plan.routing is not None and len(plan.routing) == len(plan.groups)

    def test_selection_is_minimal_feasible_latency(self):
        profile, model, workload, rt = small_inputs()
        plan, records = plan_training(profile, model, workload, rt)
        feasible = [r.l_total for r in records if r.feasible]
        assert plan.latency.l_total == min(feasible)

    def test_deterministic(self):
        profile, model, workload, rt = small_inputs()
        p1, _ = plan_training(profile, model, workload, rt)
        p2, _ = plan_training(profile, model, workload, rt)
        assert p1.to_json_dict() == p2.to_json_dict()

    def test_no_feasible_plan_raises(self):
        profile, model, workload, rt = small_inputs()
        tiny = ClusterProfile(
            devices=tuple(
                GpuDevice(id=d.id, kind=d.kind, peak_tflops=d.peak_tflops,
                          mem_capacity=1_000_000, node_id=d.node_id,
                          region_id=d.region_id)
                for d in profile.devices
            ),
            intra_node_bw=profile.intra_node_bw,
            inter_node_bw=profile.inter_node_bw,
            runtime_samples=profile.runtime_samples,
        )
        with pytest.raises(NoFeasiblePlanError, match="no feasible plan"):
            plan_training(tiny, model, workload, rt)

    def test_baseline_strategies_can_be_searched(self):
        profile, model, workload, rt = small_inputs()
        plan, records = plan_training(
            profile, model, workload, rt,
            strategies=(Strategy.PP_ZERO2, Strategy.PP_ZERO3),
        )
        assert plan.strategy in (Strategy.PP_ZERO2, Strategy.PP_ZERO3)
        assert {r.strategy for r in records} == {Strategy.PP_ZERO2,
                                                Strategy.PP_ZERO3}


class TestPlanSerialization:
    def test_round_trip(self, tmp_path):
        profile, model, workload, rt = small_inputs()
        plan, _ = plan_training(profile, model, workload, rt)
        path = tmp_path / "plan.json"
        plan.save(str(path))
        loaded = TrainingPlan.load(str(path), profile)
        assert loaded.to_json_dict() == plan.to_json_dict()

    def test_fingerprint_mismatch_rejected(self, tmp_path):
        profile, model, workload, rt = small_inputs()
        plan, _ = plan_training(profile, model, workload, rt)
        path = tmp_path / "plan.json"
        plan.save(str(path))
        other = small_profile()
        other.intra_node_bw["n0"] = 1e9
        with pytest.raises(PlanFormatError, match="cluster"):
            TrainingPlan.load(str(path), other)

    def test_corrupt_strategy_rejected(self, tmp_path):
        profile, model, workload, rt = small_inputs()
        plan, _ = plan_training(profile, model, workload, rt)
        data = plan.to_json_dict()
        data["strategy"] = "nonsense"
        path = tmp_path / "plan.json"
        path.write_text(json.dumps(data))
        with pytest.raises(PlanFormatError, match="strategy"):
            TrainingPlan.load(str(path), profile)

    def test_fingerprint_tracks_profile_changes(self):
        a = small_profile()
        b = small_profile()
        assert cluster_fingerprint(a) == cluster_fingerprint(b)
        b.intra_node_bw["n0"] = 24e9
        assert cluster_fingerprint(a) != cluster_fingerprint(b)
