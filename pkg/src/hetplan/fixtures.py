"""Synthetic clusters, models, and plan suites for tests and examples.

Everything here is deterministic: builders take explicit sizes or a seeded
``random.Random``, so test fixtures and the bundled example JSON files can be
regenerated byte-for-byte.  Runtime samples are produced exactly on an affine
per-layer law, which the fitting code recovers to float precision; that keeps
hand-computed expectations in the tests exact.
"""

from __future__ import annotations

import itertools
import json
import os
import random
from typing import Dict, Iterable, List, Sequence, Tuple

from .configure import (
    GpuGroup,
    TrainingPlan,
    balance_microbatch,
    cluster_fingerprint,
    make_ministages,
    order_groups,
    partition_layers,
)
from .costs import CostContext, Strategy
from .partition import build_cluster_graph
from .workload import (
    ClusterProfile,
    GpuDevice,
    LayerRuntimeModel,
    ModelSpec,
    WorkloadSpec,
    aggregate_group_speed,
    fit_runtime_model,
)

# Per-kind hardware numbers and affine per-layer runtime coefficients
# (seconds per layer at a per-device sample count b: alpha + beta * b).
# Backward is the gradient pass only; recomputation is charged separately.
GPU_KINDS: Dict[str, Dict[str, float]] = {
    "a100": {
        "peak_tflops": 312.0,
        "mem_capacity": 40e9,
        "fwd_alpha": 4.0e-4, "fwd_beta": 2.6e-3,
        "bwd_alpha": 8.0e-4, "bwd_beta": 5.2e-3,
    },
    "v100": {
        "peak_tflops": 125.0,
        "mem_capacity": 32e9,
        "fwd_alpha": 8.0e-4, "fwd_beta": 6.5e-3,
        "bwd_alpha": 1.6e-3, "bwd_beta": 1.3e-2,
    },
    "t4": {
        "peak_tflops": 65.0,
        "mem_capacity": 16e9,
        "fwd_alpha": 1.5e-3, "fwd_beta": 1.25e-2,
        "bwd_alpha": 3.0e-3, "bwd_beta": 2.5e-2,
    },
}

SAMPLE_BATCHES = (1, 2, 4, 8)

# Cross-region links in public clouds bottom out around a few GB/s; this is
# the measured figure used throughout the bundled examples.
CROSS_REGION_BW = 2.69e9


def runtime_samples_for(kinds: Iterable[str]) -> Dict[Tuple[str, str], List[Tuple[float, float, float]]]:
    """Exact (batch, fwd_s, bwd_s) series for each GPU kind."""
    samples = {}
    for kind in sorted(set(kinds)):
        spec = GPU_KINDS[kind]
        samples[(kind, "transformer")] = [
            (float(b),
             spec["fwd_alpha"] + spec["fwd_beta"] * b,
             spec["bwd_alpha"] + spec["bwd_beta"] * b)
            for b in SAMPLE_BATCHES
        ]
    return samples


def make_profile(
    nodes: Sequence[Tuple[str, str, str, int]],
    intra_bw: Dict[str, float],
    inter_bw: Dict[Tuple[str, str], float],
) -> ClusterProfile:
    """Build a profile from (node_id, region_id, gpu_kind, count) rows."""
    devices = []
    for node_id, region_id, kind, count in nodes:
        spec = GPU_KINDS[kind]
        for i in range(count):
            devices.append(
                GpuDevice(
                    id=f"{node_id}-{i}",
                    kind=kind,
                    peak_tflops=spec["peak_tflops"],
                    mem_capacity=int(spec["mem_capacity"]),
                    node_id=node_id,
                    region_id=region_id,
                )
            )
    return ClusterProfile(
        devices=tuple(devices),
        intra_node_bw=dict(intra_bw),
        inter_node_bw={tuple(sorted(k)): v for k, v in inter_bw.items()},
        runtime_samples=runtime_samples_for(d.kind for d in devices),
    )


def toy_cluster() -> ClusterProfile:
    """Four GPUs on two nodes; small enough for exhaustive plan search."""
    return make_profile(
        nodes=[("n0", "r0", "a100", 2), ("n1", "r0", "t4", 2)],
        intra_bw={"n0": 25e9, "n1": 10e9},
        inter_bw={("n0", "n1"): 2e9},
    )


def slow_interconnect_cluster() -> ClusterProfile:
    """Eight GPUs where every link, even within a node, is at most 3 GB/s.

    Any device group built here has slow internal collectives, which is the
    regime where re-gathering parameters per microbatch becomes expensive.
    """
    return make_profile(
        nodes=[("n0", "r0", "a100", 4), ("n1", "r0", "v100", 4)],
        intra_bw={"n0": 3e9, "n1": 3e9},
        inter_bw={("n0", "n1"): CROSS_REGION_BW},
    )


# Measured bandwidth between VMs in the same cloud region but different
# nodes; together with the cross-region figure it makes region separation
# the cheapest 2-cut (4 x 2.69 < 12.06).
INTRA_REGION_BW = 12.06e9


def two_region_cluster() -> ClusterProfile:
    """Eight GPUs, four per region, with measured-style link speeds.

    Every intra-region link is at least 12.06 GB/s and every cross-region
    link is 2.69 GB/s, so the cheapest way to split the cluster is along the
    region boundary.
    """
    nodes = [
        ("r0n0", "r0", "a100", 2), ("r0n1", "r0", "a100", 2),
        ("r1n0", "r1", "v100", 2), ("r1n1", "r1", "v100", 2),
    ]
    intra = {"r0n0": 25e9, "r0n1": 25e9, "r1n0": 20e9, "r1n1": 20e9}
    inter = {}
    for (a, _, _, _), (b, _, _, _) in itertools.combinations(nodes, 2):
        if a[:2] == b[:2]:
            inter[(a, b)] = INTRA_REGION_BW
        else:
            inter[(a, b)] = CROSS_REGION_BW
    return make_profile(nodes, intra, inter)


def large_two_region_cluster() -> ClusterProfile:
    """128 GPUs: 8 nodes x 8 a100 plus 8 nodes x 8 v100 across two regions."""
    nodes = [(f"r0n{i}", "r0", "a100", 8) for i in range(8)]
    nodes += [(f"r1n{i}", "r1", "v100", 8) for i in range(8)]
    intra = {name: (25e9 if name.startswith("r0") else 20e9)
             for name, _, _, _ in nodes}
    inter = {}
    for (a, _, _, _), (b, _, _, _) in itertools.combinations(nodes, 2):
        if a[:2] == b[:2]:
            inter[(a, b)] = 10e9 if a.startswith("r0") else 8e9
        else:
            inter[(a, b)] = CROSS_REGION_BW
    return make_profile(nodes, intra, inter)


def transformer_params_per_layer(hidden_size: int) -> int:
    """Standard decoder-block parameter count: attention + MLP + norms."""
    return 12 * hidden_size * hidden_size + 13 * hidden_size


def transformer_model(num_layers: int = 32, hidden_size: int = 4096,
                      bytes_per_element: int = 2) -> ModelSpec:
    return ModelSpec.uniform(
        num_layers,
        transformer_params_per_layer(hidden_size),
        hidden_size=hidden_size,
        bytes_per_element=bytes_per_element,
    )


def small_model() -> ModelSpec:
    return transformer_model(num_layers=8, hidden_size=1024)


def default_workload(global_batch: int = 1024, seq_len: int = 2048) -> WorkloadSpec:
    return WorkloadSpec(global_batch=global_batch, seq_len=seq_len)


def context_for(profile: ClusterProfile, model: ModelSpec,
                workload: WorkloadSpec) -> CostContext:
    return CostContext(
        graph=build_cluster_graph(profile),
        runtime=fit_runtime_model(profile),
        model=model,
        workload=workload,
    )


# ---------------------------------------------------------------------------
# Randomized plan suite
# ---------------------------------------------------------------------------

def agreement_suite(seed: int, n_cases: int) -> List[Tuple[CostContext, TrainingPlan]]:
    """Feasible plans sampled from the planner's own candidate space.

    Cycles over the three bundled fixture clusters with randomized model
    sizes and workloads, enumerates the planner's candidates for each, and
    draws one feasible candidate per case.  Every returned plan is therefore
    one the planner could emit; only the knob settings are randomized.
    """
    from .configure import enumerate_candidates
    from .partition import split_min_k_cut_sequence

    rng = random.Random(seed)
    clusters = [toy_cluster(), slow_interconnect_cluster(), two_region_cluster()]
    prepared = []
    for profile in clusters:
        prepared.append((profile, build_cluster_graph(profile),
                         fit_runtime_model(profile)))

    cases: List[Tuple[CostContext, TrainingPlan]] = []
    while len(cases) < n_cases:
        profile, graph, runtime = prepared[len(cases) % len(prepared)]
        model = transformer_model(
            num_layers=rng.choice([8, 12, 16]),
            hidden_size=rng.choice([1024, 2048]),
        )
        workload = WorkloadSpec(
            global_batch=rng.choice([16, 32, 64]),
            seq_len=rng.choice([512, 1024]),
        )
        ctx = CostContext(graph=graph, runtime=runtime, model=model,
                          workload=workload)
        k_max = min(len(profile.devices), model.num_layers, 8)
        partitions = split_min_k_cut_sequence(graph, k_max)
        feasible = [
            plan
            for plan, record in enumerate_candidates(
                ctx, profile, partitions, [rng.choice(list(Strategy))]
            )
            if record.feasible and plan.n_microbatches >= 2
        ]
        if not feasible:
            continue
        cases.append((ctx, rng.choice(feasible)))
    return cases


# ---------------------------------------------------------------------------
# Example-file export
# ---------------------------------------------------------------------------

def profile_to_json_dict(profile: ClusterProfile) -> dict:
    inter: Dict[str, Dict[str, float]] = {}
    for (a, b), bw in sorted(profile.inter_node_bw.items()):
        inter.setdefault(a, {})[b] = bw
    samples: Dict[str, Dict[str, list]] = {}
    for (kind, cls), series in sorted(profile.runtime_samples.items()):
        samples.setdefault(kind, {})[cls] = [list(s) for s in series]
    return {
        "devices": [
            {"id": d.id, "kind": d.kind, "peak_tflops": d.peak_tflops,
             "mem_capacity": d.mem_capacity, "node_id": d.node_id,
             "region_id": d.region_id}
            for d in profile.devices
        ],
        "intra_node_bw": dict(sorted(profile.intra_node_bw.items())),
        "inter_node_bw": inter,
        "runtime_samples": samples,
    }


def model_to_json_dict(model: ModelSpec, workload: WorkloadSpec) -> dict:
    return {
        "num_layers": model.num_layers,
        "params_per_layer": dict(model.params_per_layer),
        "hidden_size": model.hidden_size,
        "bytes_per_element": model.bytes_per_element,
        "global_batch": workload.global_batch,
        "seq_len": workload.seq_len,
        "precision": workload.precision,
        "optimizer_bytes_per_param": workload.optimizer_bytes_per_param,
    }


def write_example_files(directory: str) -> List[str]:
    """Write the bundled example cluster and model files; returns the paths."""
    os.makedirs(directory, exist_ok=True)
    files = {
        "toy_cluster.json": profile_to_json_dict(toy_cluster()),
        "slow_interconnect_cluster.json":
            profile_to_json_dict(slow_interconnect_cluster()),
        "two_region_cluster.json": profile_to_json_dict(two_region_cluster()),
        "small_model.json": model_to_json_dict(
            transformer_model(num_layers=12, hidden_size=1024),
            WorkloadSpec(global_batch=32, seq_len=1024),
        ),
        "medium_model.json": model_to_json_dict(
            transformer_model(num_layers=32, hidden_size=4096),
            default_workload(),
        ),
    }
    written = []
    for name, payload in sorted(files.items()):
        path = os.path.join(directory, name)
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
        written.append(path)
    return written
