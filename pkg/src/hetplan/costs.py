"""Analytic latency and memory models for candidate training plans.

The planner scores thousands of candidate configurations with these closed
forms; the discrete-event simulator (``simulate``) is the ground truth they
are validated against.

Latency: one training iteration is (forward span + backward span) over the
global ministage rounds plus a startup term (initial parameter AllGather of
the first ministage, final gradient ReduceScatter + optimizer update).  A
round costs the max over lanes — compute, collectives, and point-to-point
transfers run on separate lanes, so prefetched gathers hide under compute —
with the backward ReduceScatter as a serial tail.  The phase span follows a
per-stage recurrence with three lower bounds composed in pipeline order:
the chain bound (a stage's last microbatch trails its upstream stage's last
microbatch by one traversal, which propagates a slow group's pace
downstream), the lane bound (rounds sharing a device group serialize), and
the head bound (a round cannot end before its first microbatch's arrival
plus a full round).

Memory: per-GPU sum of parameter, gradient, optimizer, and activation terms.
Strategies differ in parameter residency (two ministages' worth when
interleaving with offload; the full stage when ZeRO-2-style; two layers plus
a shard when ZeRO-3-style) and in whether activations accumulate for every
microbatch or stream through a fixed offload window.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING, Dict, List, Sequence, Tuple

import numpy as np

from .partition import ClusterGraph
from .workload import GpuDevice, LayerRuntimeModel, ModelSpec, WorkloadSpec

if TYPE_CHECKING:  # pragma: no cover
    from .configure import TrainingPlan


class Strategy(Enum):
    """Training strategies the models and simulator can score.

    ``INTERLEAVED`` is the planned system: ministage-interleaved pipeline
    with sharded-parameter offload to host and activation streaming.  The
    other two are the comparison baselines on identical work.
    """

    INTERLEAVED = "zorse"
    PP_ZERO2 = "pp-zero2"
    PP_ZERO3 = "pp-zero3"

    @property
    def offloads(self) -> bool:
        return self is Strategy.INTERLEAVED

    @property
    def gathers_per_microbatch(self) -> bool:
        return self is Strategy.PP_ZERO3


@dataclass(frozen=True)
class CommParams:
    """Collective/point-to-point latency constants (seconds)."""

    ring_latency_per_hop: float = 50e-6
    p2p_latency: float = 100e-6


@dataclass(frozen=True)
class CostContext:
    """Everything the cost models need besides the plan itself."""

    graph: ClusterGraph
    runtime: LayerRuntimeModel
    model: ModelSpec
    workload: WorkloadSpec
    comm: CommParams = CommParams()
    k_act: float = 2.0  # transient working-set size, in boundary-activation units
    optim_update_per_param: float = 1e-10  # seconds per locally-updated parameter
    host_transfer_bw: float = 12e9  # bytes/sec GPU<->host for offload traffic


@dataclass(frozen=True)
class LatencyEstimate:
    """Iteration latency decomposition; l_total is derived, so the identity
    l_total == (l_forwards + l_backwards) * n_ministages + l_startup is exact."""

    l_forwards: float
    l_backwards: float
    l_startup: float
    n_ministages: int
    l_total: float = field(init=False)

    def __post_init__(self) -> None:
        object.__setattr__(
            self,
            "l_total",
            (self.l_forwards + self.l_backwards) * self.n_ministages + self.l_startup,
        )


@dataclass(frozen=True)
class MemoryEstimate:
    """Per-GPU peak memory decomposition in bytes; m_total is the exact sum."""

    m_params: float
    m_grads: float
    m_optim: float
    m_activations: float
    m_total: float = field(init=False)

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "m_total", self.m_params + self.m_grads + self.m_optim + self.m_activations
        )


def _min_internal_bw(graph: ClusterGraph, device_ids: Sequence[str]) -> float:
    """Slowest pairwise link among a device set (ring bottleneck).

    The planner asks this for the same device group across thousands of
    candidates, so results are cached on the graph keyed by the id tuple.
    """
    key = tuple(device_ids)
    if len(key) < 2:
        raise ValueError("bandwidth undefined for a single-device set")
    cached = graph._minbw_cache.get(key)
    if cached is None:
        slots = [graph.index_of(d) for d in key]
        sub = graph.weights[np.ix_(slots, slots)]
        cached = float(np.min(sub[np.triu_indices(len(slots), k=1)]))
        graph._minbw_cache[key] = cached
    return cached


def allgather_time(ctx: CostContext, bytes_per_shard: float, device_ids: Sequence[str]) -> float:
    """Ring AllGather time: each of g ranks contributes ``bytes_per_shard``.

    (g-1)/g of the total volume crosses the slowest link, plus per-hop latency.
    A single-member group gathers nothing.
    """
    g = len(device_ids)
    if g <= 1:
        return 0.0
    bw = _min_internal_bw(ctx.graph, device_ids)
    total = g * bytes_per_shard
    return (g - 1) / g * total / bw + (g - 1) * ctx.comm.ring_latency_per_hop


def reduce_scatter_time(ctx: CostContext, bytes_total: float, device_ids: Sequence[str]) -> float:
    """Ring ReduceScatter of ``bytes_total``; symmetric to the AllGather model."""
    g = len(device_ids)
    if g <= 1:
        return 0.0
    bw = _min_internal_bw(ctx.graph, device_ids)
    return (g - 1) / g * bytes_total / bw + (g - 1) * ctx.comm.ring_latency_per_hop


def best_cross_link(
    ctx: CostContext, src_ids: Sequence[str], dst_ids: Sequence[str]
) -> Tuple[str, str, float]:
    """Fastest (src, dst) device pair between two groups; deterministic argmax
    (first strict maximum in the given id order), cached per id-tuple pair."""
    if not src_ids or not dst_ids:
        raise ValueError("empty device set for cross link")
    key = (tuple(src_ids), tuple(dst_ids))
    cached = ctx.graph._crosslink_cache.get(key)
    if cached is None:
        rows = [ctx.graph.index_of(u) for u in key[0]]
        cols = [ctx.graph.index_of(v) for v in key[1]]
        sub = ctx.graph.weights[np.ix_(rows, cols)]
        flat = int(np.argmax(sub))
        i, j = divmod(flat, len(cols))
        cached = (key[0][i], key[1][j], float(sub[i, j]))
        ctx.graph._crosslink_cache[key] = cached
    return cached


def p2p_transfer_time(
    ctx: CostContext, bytes_payload: float, src_ids: Sequence[str], dst_ids: Sequence[str]
) -> float:
    """Stage-boundary transfer over the best available cross link."""
    _, _, bw = best_cross_link(ctx, src_ids, dst_ids)
    return bytes_payload / bw + ctx.comm.p2p_latency


def count_collectives(
    n_layers: int, n_microbatches: int, strategy: Strategy
) -> Tuple[int, int]:
    """(AllGathers, ReduceScatters) per iteration for one group's layers.

    Parameters are gathered once per layer per pass (2L) unless the strategy
    re-gathers per microbatch (2LM); gradients reduce once per layer.
    """
    if strategy.gathers_per_microbatch:
        ag = 2 * n_layers * n_microbatches
    else:
        ag = 2 * n_layers
    return ag, n_layers


# ---------------------------------------------------------------------------
# Plan-slice quantities


def _chunk_global_layers(plan: "TrainingPlan", stage_index: int) -> range:
    lo, hi = plan.stage_layer_ranges()[stage_index]
    return range(lo, hi)


def _stage_index_of(plan: "TrainingPlan", group_index: int, round_index: int) -> int:
    for idx, (g, j) in enumerate(plan.global_order()):
        if g == group_index and j == round_index:
            return idx
    raise IndexError(f"no ministage (group={group_index}, round={round_index})")


def _compute_per_microbatch(
    ctx: CostContext, plan: "TrainingPlan", stage_index: int, direction: str
) -> float:
    """Slowest device's time for one microbatch through this ministage's layers.

    ``"bwd"`` includes one forward recompute per layer (checkpointing);
    ``"bwd_only"`` is the gradient computation alone, the cost a microbatch
    adds once its recompute has already been prefetched.
    """
    gi, _ = plan.global_order()[stage_index]
    group = plan.groups[gi]
    worst = 0.0
    for dev in group.devices:
        share = group.shares[dev.id]
        if share <= 0:
            continue
        t = 0.0
        for layer in _chunk_global_layers(plan, stage_index):
            cls = ctx.model.class_of(layer)
            fit = ctx.runtime.fit_for(dev.kind, cls)
            fwd = fit.fwd_alpha + fit.fwd_beta * share
            bwd = fit.bwd_alpha + fit.bwd_beta * share
            if direction == "fwd":
                t += fwd
            elif direction == "bwd":
                t += fwd + bwd
            else:
                t += bwd
        worst = max(worst, t)
    return worst


def _chunk_allgather_times(
    ctx: CostContext, plan: "TrainingPlan", stage_index: int
) -> List[float]:
    """Per-layer parameter AllGather times for this ministage."""
    gi, _ = plan.global_order()[stage_index]
    group = plan.groups[gi]
    d_dp = len(group.devices)
    elem = ctx.model.bytes_per_element
    out = []
    for layer in _chunk_global_layers(plan, stage_index):
        shard = ctx.model.params_of(layer) * elem / d_dp
        out.append(allgather_time(ctx, shard, group.device_ids))
    return out


def _chunk_reduce_scatter_time(
    ctx: CostContext, plan: "TrainingPlan", stage_index: int
) -> float:
    gi, _ = plan.global_order()[stage_index]
    group = plan.groups[gi]
    elem = ctx.model.bytes_per_element
    total = 0.0
    for layer in _chunk_global_layers(plan, stage_index):
        total += reduce_scatter_time(ctx, ctx.model.params_of(layer) * elem, group.device_ids)
    return total


def _boundary_p2p_times(ctx: CostContext, plan: "TrainingPlan") -> List[float]:
    """Per-microbatch transfer time into each global stage (0 for the first
    stage and for same-group adjacency)."""
    order = plan.global_order()
    act_bytes = (
        plan.microbatch_size * ctx.workload.seq_len * ctx.model.hidden_size
        * ctx.model.bytes_per_element
    )
    times = [0.0]
    for idx in range(1, len(order)):
        prev_g = order[idx - 1][0]
        cur_g = order[idx][0]
        if prev_g == cur_g:
            times.append(0.0)
        else:
            times.append(
                p2p_transfer_time(
                    ctx,
                    act_bytes,
                    plan.groups[prev_g].device_ids,
                    plan.groups[cur_g].device_ids,
                )
            )
    return times


def stage_latency(
    ctx: CostContext,
    plan: "TrainingPlan",
    group_index: int,
    round_index: int,
    direction: str = "fwd",
) -> float:
    """Latency of one ministage round (all microbatches) for one group.

    max over lanes of (compute, collective traffic, incoming/outgoing
    transfers).  A chunk's AllGathers prefetch during the previous round, so
    in steady state they cost the round only their collective-lane occupancy.
    Backward adds one forward recompute per layer to compute and the gradient
    ReduceScatter as a serial tail: the reduction only starts once the last
    microbatch's gradients exist, and the next round's gradient buffer waits
    for it, so it cannot hide under this round's compute.
    """
    stage_index = _stage_index_of(plan, group_index, round_index)
    m = plan.n_microbatches
    compute_mb = _compute_per_microbatch(ctx, plan, stage_index, direction)
    ag = _chunk_allgather_times(ctx, plan, stage_index)
    rs = _chunk_reduce_scatter_time(ctx, plan, stage_index) if direction == "bwd" else 0.0
    p2p = _boundary_p2p_times(ctx, plan)
    order = plan.global_order()
    d_in = p2p[stage_index]
    d_out = p2p[stage_index + 1] if stage_index + 1 < len(order) else 0.0
    if plan.strategy.gathers_per_microbatch:
        # Per-microbatch gathers cannot be prefetched past the previous
        # microbatch, so they serialize with compute.
        base = m * (compute_mb + sum(ag)) + rs
        return max(base, m * d_in, m * d_out)
    return max(m * compute_mb, sum(ag), m * d_in, m * d_out) + rs


def _phase_makespan(
    stage_groups: List[int],
    chain_mb: List[float],
    lane_round: List[float],
    head_round: List[float],
    rs_tail: List[float],
    d_in: List[float],
    floors: List[float],
    start: float,
) -> Tuple[float, Dict[int, float]]:
    """Makespan of one pipelined pass; stages are given in processing order.

    Each stage's round completion obeys three lower bounds, composed as a
    recurrence along the pipeline:

    * chain — the round's last microbatch trails the upstream stage's last
      microbatch by one transfer + traversal, so a slow upstream group paces
      every stage after it;
    * lane — rounds whose stages share a device group execute serially on
      that group's compute lane (full-round cost each);
    * head — a round cannot finish before its first microbatch begins (input
      arrived, parameter floor met, and the lane's previous round drained)
      plus ``head_round``, which may discount work prefetchable into the
      preceding idle time.

    The gradient ReduceScatter is a serial tail on the group's own path: the
    lane's next round reuses the gradient buffer and waits for it, but the
    hand-off to the downstream stage departs as soon as its gradients exist,
    so the tail never delays the chain.  Returns the final completion time
    and each group's last-round end (tail included).
    """
    e_chain = start
    f1 = start
    e_lane: Dict[int, float] = {}
    for i, g in enumerate(stage_groups):
        begin = max(f1 + d_in[i], floors[i], e_lane.get(g, 0.0))
        e = max(e_chain + chain_mb[i] + d_in[i], begin + head_round[i])
        if g in e_lane:
            e = max(e, e_lane[g] + lane_round[i])
        e_lane[g] = e + rs_tail[i]
        e_chain = e
        f1 = begin + chain_mb[i]
    return e_chain, e_lane


def total_iteration_latency(ctx: CostContext, plan: "TrainingPlan") -> LatencyEstimate:
    """Full-iteration latency estimate for a plan.

    The forward pass starts once the first ministages' parameters are
    gathered (a two-ministage prefetch window per group, serial on the
    group's collective lane); the backward pass starts once the last global
    stage's forward round has drained, re-gathering one layer before its
    first recompute.  After each group's final round come its gradient
    ReduceScatter and optimizer update.  The reported startup term carries
    the first ministage's share of those boundary costs; the forward/backward
    terms absorb the rest, so the identity on ``LatencyEstimate`` is exact.
    """
    order = plan.global_order()
    n_stages = len(order)
    m = plan.n_microbatches
    z3 = plan.strategy.gathers_per_microbatch
    stage_group = [g for g, _ in order]

    ag_times = [_chunk_allgather_times(ctx, plan, s) for s in range(n_stages)]
    ag_sum = [sum(chain) for chain in ag_times]
    rs_times = [_chunk_reduce_scatter_time(ctx, plan, s) for s in range(n_stages)]
    p2p = _boundary_p2p_times(ctx, plan)

    fwd_mb = [_compute_per_microbatch(ctx, plan, s, "fwd") for s in range(n_stages)]
    bwd_mb = [_compute_per_microbatch(ctx, plan, s, "bwd") for s in range(n_stages)]
    bwd_only = [_compute_per_microbatch(ctx, plan, s, "bwd_only") for s in range(n_stages)]

    def round_core(s: int, lane_mb: float, d_out: float) -> float:
        # A transfer's wire time occupies the sender's lane: charge the
        # outgoing boundary here; the incoming one is the upstream stage's
        # outgoing and reaches this stage through the chain bound.
        if z3:
            return max(m * (lane_mb + ag_sum[s]), m * d_out)
        return max(m * lane_mb, ag_sum[s], m * d_out)

    # Forward pass.  Only each group's first two ministages gather before the
    # pipeline moves (the offload window holds two); later gathers hide in
    # rounds.  Under per-microbatch gathering, a group's first chunk prefetches
    # its initial gather but later chunks gather in-band with the wave.
    floors_f = [0.0] * n_stages
    chain_f = list(fwd_mb)
    if z3:
        for s, (g, q) in enumerate(order):
            if q > 0:
                chain_f[s] += ag_sum[s]
    else:
        cum: Dict[int, float] = {}
        for s, (g, q) in enumerate(order):
            if q <= 1:
                cum[g] = cum.get(g, 0.0) + ag_sum[s]
                floors_f[s] = cum[g]
    rounds_f = [
        round_core(s, fwd_mb[s], p2p[s + 1] if s + 1 < n_stages else 0.0)
        for s in range(n_stages)
    ]
    t_fwd, _ = _phase_makespan(
        stage_group, chain_f, rounds_f, rounds_f, [0.0] * n_stages, p2p,
        floors_f, 0.0,
    )

    # Backward processes the stages in reverse: stage s receives from s+1.
    # Recomputes interleave with gradient steps on the compute lane —
    # recompute of microbatch p waits for backward of p-1 — so only the
    # first recompute can hide, and only on a lane idle ahead of the wave:
    # a group's first backward chunk away from the wave origin.  At the
    # origin the lane just finished its forward round and the whole chunk
    # re-gathers before anything recomputes; later chunks on a lane wait on
    # the previous chunk's ReduceScatter and get no head start either.
    rev = list(reversed(range(n_stages)))
    d_in_b = [0.0 if pos == 0 else p2p[s + 1] for pos, s in enumerate(rev)]
    floors_b = [0.0] * n_stages
    if not z3:
        floors_b[0] = t_fwd + ag_sum[rev[0]]
    chain_b = []
    heads_b = []
    lanes_b = []
    seen: set = set()
    for pos, s in enumerate(rev):
        g = stage_group[s]
        first_of_group = g not in seen
        seen.add(g)
        lane = round_core(s, bwd_mb[s], p2p[s])
        lanes_b.append(lane)
        recompute = bwd_mb[s] - bwd_only[s]
        if pos == 0:
            chain_b.append(bwd_mb[s] + (ag_sum[s] if z3 else 0.0))
            heads_b.append(lane)
        elif first_of_group:
            chain_b.append(bwd_only[s])
            heads_b.append(max(lane - recompute, m * bwd_only[s]))
        else:
            chain_b.append(bwd_only[s] + (ag_sum[s] if z3 else 0.0))
            heads_b.append(lane)
    _, lane_ends = _phase_makespan(
        [stage_group[s] for s in rev],
        chain_b, lanes_b, heads_b,
        [rs_times[s] for s in rev],
        d_in_b, floors_b, t_fwd,
    )

    # Each group's optimizer update follows its final round: the last
    # ministage's shard when interleaving, the whole stage's shard otherwise.
    group_chunk0_params = {}
    group_total_params = {}
    for s, (g, q) in enumerate(order):
        chunk = sum(ctx.model.params_of(layer) for layer in _chunk_global_layers(plan, s))
        if q == 0:
            group_chunk0_params[g] = chunk
        group_total_params[g] = group_total_params.get(g, 0.0) + chunk
    t_total = 0.0
    for g, end in lane_ends.items():
        local = (
            group_chunk0_params[g] if plan.strategy.offloads else group_total_params[g]
        )
        update = local / len(plan.groups[g].devices) * ctx.optim_update_per_param
        t_total = max(t_total, end + update)

    first_group = plan.groups[stage_group[0]]
    startup = (
        ag_sum[0]
        + rs_times[0]
        + group_chunk0_params[stage_group[0]]
        / len(first_group.devices)
        * ctx.optim_update_per_param
    )

    rounds = plan.n_ministage_rounds
    return LatencyEstimate(
        l_forwards=(t_fwd - ag_sum[0]) / rounds,
        l_backwards=(t_total - t_fwd + ag_sum[0] - startup) / rounds,
        l_startup=startup,
        n_ministages=rounds,
    )


# ---------------------------------------------------------------------------
# Memory


def _group_chunk_param_bytes(
    ctx: CostContext, plan: "TrainingPlan", group_index: int
) -> List[float]:
    """Parameter bytes of each of the group's ministages, in round order."""
    elem = ctx.model.bytes_per_element
    out = []
    for idx, (g, _) in enumerate(plan.global_order()):
        if g != group_index:
            continue
        out.append(
            sum(ctx.model.params_of(layer) for layer in _chunk_global_layers(plan, idx)) * elem
        )
    return out


def memory_estimate(
    ctx: CostContext,
    plan: "TrainingPlan",
    group_index: int,
    device_id: str,
    strategy: Strategy | None = None,
) -> MemoryEstimate:
    """Peak per-GPU memory for one device under a strategy.

    Parameter residency: interleaved-offload holds at most two consecutive
    ministages (current + prefetch); ZeRO-2 holds the whole stage; ZeRO-3
    holds two layers plus a 1/d_dp shard of the rest.  Gradients: one
    ministage's full gradients (sharded under ZeRO-3) plus the persistent
    sharded accumulation buffer.  Optimizer state is always sharded.
    Activations either stream through a fixed window (offload on) or
    accumulate for all microbatches and layers (offload off); both include
    the transient working set.
    """
    if strategy is None:
        strategy = plan.strategy
    group = plan.groups[group_index]
    d_dp = len(group.devices)
    elem = ctx.model.bytes_per_element
    chunk_bytes = _group_chunk_param_bytes(ctx, plan, group_index)
    group_layers = [
        layer
        for idx, (g, _) in enumerate(plan.global_order())
        if g == group_index
        for layer in _chunk_global_layers(plan, idx)
    ]
    total_param_bytes = sum(ctx.model.params_of(layer) for layer in group_layers) * elem

    if strategy is Strategy.INTERLEAVED:
        if len(chunk_bytes) == 1:
            m_params = chunk_bytes[0]
        else:
            m_params = max(
                chunk_bytes[i] + chunk_bytes[i + 1] for i in range(len(chunk_bytes) - 1)
            )
    elif strategy is Strategy.PP_ZERO2:
        m_params = total_param_bytes
    else:  # PP_ZERO3
        layer_bytes = sorted(
            (ctx.model.params_of(layer) * elem for layer in group_layers), reverse=True
        )
        materialized = sum(layer_bytes[:2])
        m_params = materialized + (total_param_bytes - materialized) / d_dp

    active_full = max(chunk_bytes)
    if strategy is Strategy.PP_ZERO3:
        active_full /= d_dp
    m_grads = active_full + total_param_bytes / d_dp

    group_param_count = sum(ctx.model.params_of(layer) for layer in group_layers)
    m_optim = group_param_count * ctx.workload.optimizer_bytes_per_param / d_dp

    share = group.shares[device_id]
    act_unit = share * ctx.workload.seq_len * ctx.model.hidden_size * elem
    if strategy.offloads:
        m_activations = (2 + ctx.k_act) * act_unit
    else:
        layers_g = len(group_layers)
        m_activations = (plan.n_microbatches * layers_g + ctx.k_act) * act_unit

    return MemoryEstimate(
        m_params=m_params,
        m_grads=m_grads,
        m_optim=m_optim,
        m_activations=m_activations,
    )


def memory_fits(estimate: MemoryEstimate, gpu: GpuDevice, headroom: float = 0.9) -> bool:
    """Whether the estimate fits the device's capacity scaled by headroom.

    Boundary inclusive: exactly headroom * capacity fits.
    """
    return estimate.m_total <= headroom * gpu.mem_capacity
