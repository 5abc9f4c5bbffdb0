"""Command-line front end.

Subcommands mirror the library's pipeline:

    hetplan partition  --cluster c.json --k 4 [--out parts.json]
    hetplan plan       --cluster c.json --model m.json --out plan.json
    hetplan simulate   --cluster c.json --model m.json --plan plan.json
    hetplan report     --cluster c.json --model m.json --plan plan.json

Exit codes: 0 success, 2 bad input (unreadable or invalid files, mismatched
plan/cluster), 3 no feasible plan under the memory headroom, 4 simulation
failure.  Wall-clock timings go to stdout only; every output file is a pure
function of the inputs, so re-running a command produces byte-identical
artifacts.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from typing import Dict, Optional, Tuple

from .configure import (
    NoFeasiblePlanError,
    PlanFormatError,
    TrainingPlan,
    cluster_fingerprint,
    plan_training,
)
from .costs import (
    CommParams,
    CostContext,
    Strategy,
    memory_estimate,
    total_iteration_latency,
)
from .partition import PartitionError, build_cluster_graph, split_min_k_cut_sequence
from .simulate import SimulationError, simulate_plan
from .workload import (
    ClusterProfile,
    ModelSpec,
    ProfileError,
    WorkloadSpec,
    fit_runtime_model,
    load_cluster_profile,
    load_model_workload,
)

EXIT_OK = 0
EXIT_BAD_INPUT = 2
EXIT_NO_PLAN = 3
EXIT_SIM_FAILED = 4

STRATEGY_CHOICES = [s.value for s in Strategy] + ["all"]

# Keys accepted in a --comm-config file, mapped onto the cost-model knobs.
_COMM_KEYS = {
    "ring_latency_per_hop", "p2p_latency",
    "host_transfer_bw", "k_act", "optim_update_per_param",
}


class InputError(ValueError):
    """Any unusable command input; mapped to exit code 2."""


def _load_comm_config(path: Optional[str]) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read comm config {path!r}: {exc}")
    unknown = set(raw) - _COMM_KEYS
    if unknown:
        raise InputError(
            f"unknown comm config keys {sorted(unknown)}; "
            f"expected a subset of {sorted(_COMM_KEYS)}"
        )
    return {k: float(v) for k, v in raw.items()}


def _split_comm(cfg: dict) -> Tuple[CommParams, dict]:
    comm = CommParams(
        ring_latency_per_hop=cfg.get("ring_latency_per_hop",
                                     CommParams().ring_latency_per_hop),
        p2p_latency=cfg.get("p2p_latency", CommParams().p2p_latency),
    )
    extra = {k: cfg[k] for k in ("host_transfer_bw", "k_act",
                                 "optim_update_per_param") if k in cfg}
    return comm, extra


def _load_inputs(args) -> Tuple[ClusterProfile, ModelSpec, WorkloadSpec]:
    profile = load_cluster_profile(args.cluster)
    model, workload = load_model_workload(args.model)
    batch_tokens = getattr(args, "batch_tokens", None)
    if batch_tokens is not None:
        if batch_tokens <= 0 or batch_tokens % workload.seq_len != 0:
            raise InputError(
                f"--batch-tokens {batch_tokens} is not a positive multiple of "
                f"the sequence length {workload.seq_len}"
            )
        workload = WorkloadSpec(
            global_batch=batch_tokens // workload.seq_len,
            seq_len=workload.seq_len,
            precision=workload.precision,
            optimizer_bytes_per_param=workload.optimizer_bytes_per_param,
        )
    return profile, model, workload


def _make_context(profile, model, workload, comm_cfg) -> CostContext:
    comm, extra = _split_comm(comm_cfg)
    return CostContext(
        graph=build_cluster_graph(profile),
        runtime=fit_runtime_model(profile),
        model=model,
        workload=workload,
        comm=comm,
        **extra,
    )


def _write_json(path: str, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _strategies(name: str):
    if name == "all":
        return tuple(Strategy)
    return (Strategy(name),)


# ---------------------------------------------------------------------------
# Subcommands


def _cmd_partition(args) -> int:
    profile = load_cluster_profile(args.cluster)
    graph = build_cluster_graph(profile)
    t0 = time.perf_counter()
    sequence = split_min_k_cut_sequence(graph, args.k)
    elapsed = time.perf_counter() - t0
    payload = {
        "cluster_fingerprint": cluster_fingerprint(profile),
        "partitions": [
            {
                "k": part.k,
                "cut_weight": part.cut_weight,
                "groups": sorted(sorted(g) for g in part.groups),
            }
            for part in sequence
        ],
    }
    for entry in payload["partitions"]:
        print(f"k={entry['k']}: cut weight {entry['cut_weight']:.6g}, "
              f"group sizes {[len(g) for g in entry['groups']]}")
    print(f"partitioned {len(graph)} devices up to k={args.k} "
          f"in {elapsed:.3f} s")
    if args.out:
        _write_json(args.out, payload)
        print(f"wrote {args.out}")
    return EXIT_OK


def _cmd_plan(args) -> int:
    profile, model, workload = _load_inputs(args)
    comm, extra = _split_comm(_load_comm_config(args.comm_config))
    runtime = fit_runtime_model(profile)
    t0 = time.perf_counter()
    best, records = plan_training(
        profile, model, workload, runtime,
        strategies=_strategies(args.strategy),
        k_max=args.k,
        headroom=args.headroom,
        comm=comm,
        **extra,
    )
    elapsed = time.perf_counter() - t0
    feasible = sum(1 for r in records if r.feasible)
    print(f"searched {len(records)} candidates ({feasible} feasible) "
          f"in {elapsed:.3f} s")
    print(f"selected: strategy={best.strategy.value} groups={len(best.groups)} "
          f"microbatches={best.n_microbatches} "
          f"ministages={[g.ministage_sizes for g in best.groups]}")
    if best.latency is not None:
        print(f"estimated iteration time: {best.latency.l_total:.6f} s")
    best.save(args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


def _busy_json(busy: Dict) -> Dict[str, float]:
    return {f"{dev}/{lane}": frac for (dev, lane), frac in sorted(busy.items())}


def _cmd_simulate(args) -> int:
    profile, model, workload = _load_inputs(args)
    ctx = _make_context(profile, model, workload,
                        _load_comm_config(args.comm_config))
    plan = TrainingPlan.load(args.plan, profile)
    t0 = time.perf_counter()
    timeline = simulate_plan(ctx, plan)
    elapsed = time.perf_counter() - t0
    print(f"simulated {len(timeline.events)} events in {elapsed:.3f} s")
    print(f"iteration time: {timeline.iteration_time:.6f} s")
    if args.gantt:
        timeline.write_gantt_csv(args.gantt)
        print(f"wrote {args.gantt}")
    if args.mem_trace:
        timeline.write_memory_csv(args.mem_trace)
        print(f"wrote {args.mem_trace}")
    if args.out:
        _write_json(args.out, {
            "iteration_time": timeline.iteration_time,
            "n_events": len(timeline.events),
            "collective_counts": {
                str(gi): counts
                for gi, counts in timeline.collective_counts.items()
            },
            "memory_peaks": timeline.memory_peaks,
            "busy_fraction": _busy_json(timeline.busy),
        })
        print(f"wrote {args.out}")
    return EXIT_OK


def _cmd_report(args) -> int:
    profile, model, workload = _load_inputs(args)
    ctx = _make_context(profile, model, workload,
                        _load_comm_config(args.comm_config))
    plan = TrainingPlan.load(args.plan, profile)
    t0 = time.perf_counter()
    est = total_iteration_latency(ctx, plan)
    timeline = simulate_plan(ctx, plan)
    elapsed = time.perf_counter() - t0

    devices = {}
    worst = 0.0
    for gi, group in enumerate(plan.groups):
        for dev in group.devices:
            m = memory_estimate(ctx, plan, gi, dev.id)
            peak = timeline.memory_peaks[dev.id]["total"]
            budget = dev.mem_capacity * args.headroom
            devices[dev.id] = {
                "estimated_bytes": m.m_total,
                "simulated_peak_bytes": peak,
                "budget_bytes": budget,
                "fits": m.m_total <= budget,
            }
            worst = max(worst, peak / budget)

    ratio = est.l_total / timeline.iteration_time
    payload = {
        "latency": {
            "estimated_s": est.l_total,
            "simulated_s": timeline.iteration_time,
            "ratio": ratio,
        },
        "memory": devices,
        "collective_counts": {
            str(gi): counts for gi, counts in timeline.collective_counts.items()
        },
        "strategy": plan.strategy.value,
    }
    print(f"latency: estimated {est.l_total:.6f} s, simulated "
          f"{timeline.iteration_time:.6f} s (ratio {ratio:.3f})")
    print(f"memory: worst device at {100 * worst:.1f}% of its headroom budget")
    for dev_id in sorted(devices):
        d = devices[dev_id]
        print(f"  {dev_id}: est {d['estimated_bytes'] / 1e9:.2f} GB, "
              f"sim peak {d['simulated_peak_bytes'] / 1e9:.2f} GB, "
              f"budget {d['budget_bytes'] / 1e9:.2f} GB"
              f"{'' if d['fits'] else '  [OVER]'}")
    print(f"report computed in {elapsed:.3f} s")
    if args.out:
        _write_json(args.out, payload)
        print(f"wrote {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hetplan",
        description="Plan and simulate pipelined training on heterogeneous "
                    "GPU clusters.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, model=True):
        p.add_argument("--cluster", required=True,
                       help="cluster profile JSON file")
        if model:
            p.add_argument("--model", required=True,
                           help="model/workload JSON file")
            p.add_argument("--batch-tokens", type=int, default=None,
                           help="override the global batch, given in tokens "
                            "(must be a multiple of the sequence length)")
            p.add_argument("--comm-config", default=None,
                           help="JSON file overriding communication constants")

    p = sub.add_parser("partition",
                       help="split the cluster into candidate device groups")
    add_common(p, model=False)
    p.add_argument("--k", type=int, required=True,
                   help="largest number of groups to produce")
    p.add_argument("--out", default=None, help="write partitions as JSON")
    p.set_defaults(func=_cmd_partition)

    p = sub.add_parser("plan", help="search for the best training plan")
    add_common(p)
    p.add_argument("--k", type=int, default=None,
                   help="largest number of device groups to consider")
    p.add_argument("--strategy", choices=STRATEGY_CHOICES, default="zorse",
                   help="execution strategy to search over")
    p.add_argument("--headroom", type=float, default=0.9,
                   help="usable fraction of each device's memory")
    p.add_argument("--out", required=True, help="write the selected plan here")
    p.set_defaults(func=_cmd_plan)

    p = sub.add_parser("simulate", help="run one iteration of a saved plan")
    add_common(p)
    p.add_argument("--plan", required=True, help="plan JSON produced by 'plan'")
    p.add_argument("--out", default=None, help="write a timeline summary JSON")
    p.add_argument("--gantt", default=None,
                   help="write the full event schedule as CSV")
    p.add_argument("--mem-trace", default=None,
                   help="write per-device memory timelines as CSV")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("report",
                       help="compare model estimates against the simulator")
    add_common(p)
    p.add_argument("--plan", required=True, help="plan JSON produced by 'plan'")
    p.add_argument("--headroom", type=float, default=0.9,
                   help="usable fraction of each device's memory")
    p.add_argument("--out", default=None, help="write the comparison as JSON")
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (InputError, ProfileError, PlanFormatError, PartitionError,
            OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    except NoFeasiblePlanError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NO_PLAN
    except SimulationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SIM_FAILED


if __name__ == "__main__":
    sys.exit(main())
