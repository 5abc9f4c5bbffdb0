"""Discrete-event simulator for one training iteration of a plan.

Ground truth for the analytic models: the plan's work is expanded into an
explicit task graph and list-scheduled over per-device lanes, so overlap,
contention, and memory pressure emerge from dependencies rather than from
closed-form assumptions.

Lanes per device: ``compute`` (layer math, optimizer updates), ``collective``
(ring AllGather/ReduceScatter, occupied on every group member), ``p2p``
(stage-boundary transfers), and ``host`` (activation offload traffic).

Event kinds: Fwd, Recompute, Bwd, AllGather, ReduceScatter, P2PSend, P2PRecv,
OffloadAct, LoadAct, FreeParams, OptimStep.

Memory is tracked per device in the same four categories as the analytic
estimate (params, grads, optim, activations) via deltas applied at event
start/end; capacity-shaped behavior comes from explicit gating dependencies:

- a ministage's parameter gather waits for the offload of the
  chunk-before-last (two-resident-chunk window),
- forward compute of microbatch m+2 waits on microbatch m's activation
  offload (double-buffered streaming window),
- a chunk's first backward waits on the previous chunk's ReduceScatter
  (one active gradient ministage at a time).

Determinism: tasks are created in a fixed order and the scheduler breaks
ties on (earliest start, pipeline position, microbatch, kind, layer,
creation order).  Two runs of the same plan produce identical timelines.
"""

from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from .costs import (
    CostContext,
    Strategy,
    allgather_time,
    best_cross_link,
    reduce_scatter_time,
)
from .configure import TrainingPlan

KIND_RANK = {
    "AllGather": 0,
    "P2PRecv": 1,
    "LoadAct": 2,
    "Fwd": 3,
    "Recompute": 4,
    "Bwd": 5,
    "P2PSend": 6,
    "OffloadAct": 7,
    "FreeParams": 8,
    "ReduceScatter": 9,
    "OptimStep": 10,
}

CATEGORIES = ("params", "grads", "optim", "activations")


class SimulationError(RuntimeError):
    """Raised for malformed plans or a wedged task graph."""


@dataclass
class _Task:
    seq: int
    key: tuple
    kind: str
    group: int
    stage: int
    microbatch: int
    layer: int
    duration: float
    lanes: Tuple[Tuple[str, str], ...]
    deps: Tuple[tuple, ...]
    effects: Tuple[Tuple[str, str, float, str], ...]  # (device, category, delta, at)
    prio: tuple


@dataclass(frozen=True)
class ScheduledEvent:
    kind: str
    group: int
    stage: int
    microbatch: int
    layer: int
    start: float
    end: float
    device_ids: Tuple[str, ...]
    lane: str

    @property
    def duration(self) -> float:
        return self.end - self.start


@dataclass
class Timeline:
    """Result of simulating one iteration."""

    iteration_time: float
    events: List[ScheduledEvent]
    collective_counts: Dict[int, Dict[str, int]]
    memory_peaks: Dict[str, Dict[str, float]]
    memory_trace: Dict[str, List[Tuple[float, float, float, float, float, float]]]
    busy: Dict[Tuple[str, str], float]

    def events_of(self, kind: str) -> List[ScheduledEvent]:
        return [e for e in self.events if e.kind == kind]

    def write_gantt_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["start", "end", "kind", "group", "stage", "microbatch", "layer",
                 "lane", "devices"]
            )
            for e in self.events:
                writer.writerow(
                    [repr(e.start), repr(e.end), e.kind, e.group, e.stage,
                     e.microbatch, e.layer, e.lane, " ".join(e.device_ids)]
                )

    def write_memory_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["device", "time", "params", "grads", "optim", "activations",
                 "total"]
            )
            for dev in sorted(self.memory_trace):
                for row in self.memory_trace[dev]:
                    writer.writerow([dev] + [repr(v) for v in row])


# ---------------------------------------------------------------------------
# Task-graph construction


class _Builder:
    def __init__(self, ctx: CostContext, plan: TrainingPlan) -> None:
        self.ctx = ctx
        self.plan = plan
        self.tasks: List[_Task] = []
        self.by_key: Dict[tuple, _Task] = {}
        self.order = plan.global_order()
        self.ranges = plan.stage_layer_ranges()
        self.n_stages = len(self.order)
        if sum(g.layers_assigned for g in plan.groups) != ctx.model.num_layers:
            raise SimulationError(
                f"plan covers {sum(g.layers_assigned for g in plan.groups)} layers, "
                f"model has {ctx.model.num_layers}"
            )

    # -- geometry helpers ---------------------------------------------------

    def group_of(self, stage: int) -> int:
        return self.order[stage][0]

    def layers_of(self, stage: int) -> range:
        lo, hi = self.ranges[stage]
        return range(lo, hi)

    def dev_ids(self, gi: int) -> Tuple[str, ...]:
        return self.plan.groups[gi].device_ids

    def stage_pos(self, stage: int, direction: str) -> int:
        return stage if direction == "f" else 2 * self.n_stages - 1 - stage

    def fwd_stages_of_group(self, gi: int) -> List[int]:
        return [s for s in range(self.n_stages) if self.group_of(s) == gi]

    def compute_time(self, stage: int, part: str) -> float:
        """Slowest device's per-microbatch time; part is fwd|bwd (bwd excludes
        the recompute, which is its own event with fwd cost)."""
        gi = self.group_of(stage)
        group = self.plan.groups[gi]
        worst = 0.0
        for dev in group.devices:
            share = group.shares[dev.id]
            if share <= 0:
                continue
            t = 0.0
            for layer in self.layers_of(stage):
                fit = self.ctx.runtime.fit_for(dev.kind, self.ctx.model.class_of(layer))
                if part == "fwd":
                    t += fit.fwd_alpha + fit.fwd_beta * share
                else:
                    t += fit.bwd_alpha + fit.bwd_beta * share
            worst = max(worst, t)
        return worst

    def act_unit(self, gi: int, dev_id: str) -> float:
        group = self.plan.groups[gi]
        return (
            group.shares[dev_id] * self.ctx.workload.seq_len
            * self.ctx.model.hidden_size * self.ctx.model.bytes_per_element
        )

    def act_transfer_time(self, gi: int) -> float:
        worst = max(self.act_unit(gi, d) for d in self.dev_ids(gi))
        return worst / self.ctx.host_transfer_bw

    def layer_bytes(self, layer: int) -> float:
        return self.ctx.model.params_of(layer) * self.ctx.model.bytes_per_element

    def chunk_bytes(self, stage: int) -> float:
        return sum(self.layer_bytes(layer) for layer in self.layers_of(stage))

    def ag_time(self, stage: int, layer: int) -> float:
        gi = self.group_of(stage)
        d_dp = len(self.dev_ids(gi))
        return allgather_time(self.ctx, self.layer_bytes(layer) / d_dp, self.dev_ids(gi))

    def rs_time(self, stage: int, layer: int) -> float:
        gi = self.group_of(stage)
        return reduce_scatter_time(self.ctx, self.layer_bytes(layer), self.dev_ids(gi))

    def z3_window_bytes(self, stage: int) -> float:
        """Materialized-parameter window: the chunk's two largest layers,
        minus the shard slice that is already resident."""
        gi = self.group_of(stage)
        d_dp = len(self.dev_ids(gi))
        sizes = sorted((self.layer_bytes(layer) for layer in self.layers_of(stage)),
                       reverse=True)
        return sum(sizes[:2]) * (1.0 - 1.0 / d_dp)

    # -- task emission ------------------------------------------------------

    def add(self, key, kind, stage, microbatch=-1, layer=-1, *, duration,
            lanes, deps, effects=()) -> None:
        gi = self.group_of(stage) if stage >= 0 else -1
        direction = "f" if key[0].endswith("f") or key[0] in ("F", "OA") else "b"
        pos = self.stage_pos(stage, direction) if stage >= 0 else 2 * self.n_stages
        if kind == "OptimStep":
            pos = 2 * self.n_stages
        prio = (pos, microbatch, KIND_RANK[kind], layer, len(self.tasks))
        task = _Task(
            seq=len(self.tasks), key=key, kind=kind, group=gi, stage=stage,
            microbatch=microbatch, layer=layer, duration=duration,
            lanes=tuple(lanes), deps=tuple(deps), effects=tuple(effects),
            prio=prio,
        )
        if key in self.by_key:
            raise SimulationError(f"duplicate task key {key}")
        self.by_key[key] = task
        self.tasks.append(task)

    def lanes(self, gi: int, lane: str) -> Tuple[Tuple[str, str], ...]:
        return tuple((d, lane) for d in self.dev_ids(gi))

    def build(self) -> List[_Task]:
        plan, ctx = self.plan, self.ctx
        strategy = plan.strategy
        m_count = plan.n_microbatches
        offload = strategy.offloads
        per_mb_gather = strategy.gathers_per_microbatch
        k_act = ctx.k_act

        # Cross-group boundary links, computed once per boundary/direction.
        send_link: Dict[Tuple[int, str], Tuple[str, str, float]] = {}
        for b in range(self.n_stages - 1):
            g_lo, g_hi = self.group_of(b), self.group_of(b + 1)
            if g_lo == g_hi:
                continue
            send_link[(b, "f")] = best_cross_link(
                ctx, self.dev_ids(g_lo), self.dev_ids(g_hi))
            send_link[(b, "b")] = best_cross_link(
                ctx, self.dev_ids(g_hi), self.dev_ids(g_lo))
        boundary_bytes = (
            plan.microbatch_size * ctx.workload.seq_len
            * ctx.model.hidden_size * ctx.model.bytes_per_element
        )

        fwd_pos: Dict[int, List[Tuple[int, int]]] = {}  # gi -> [(stage, mb)]
        for gi in range(len(plan.groups)):
            fwd_pos[gi] = [(s, m) for s in self.fwd_stages_of_group(gi)
                           for m in range(m_count)]

        # ---------------- forward pass ----------------
        for s in range(self.n_stages):
            gi = self.group_of(s)
            group = plan.groups[gi]
            d_dp = group.d_dp
            layers = list(self.layers_of(s))
            q = self.fwd_stages_of_group(gi).index(s)

            if per_mb_gather:
                for m in range(m_count):
                    for i, layer in enumerate(layers):
                        deps = []
                        if i > 0:
                            deps.append(("AGf", s, i - 1, m))
                        elif m > 0:
                            deps.append(("F", s, m - 1))
                        elif q >= 1:
                            # One materialized-parameter window per group at
                            # a time: the next chunk's first gather waits for
                            # the previous chunk's last forward.
                            deps.append(("F", self.fwd_stages_of_group(gi)[q - 1],
                                         m_count - 1))
                        effects = []
                        if i == 0:
                            effects = [(d, "params", self.z3_window_bytes(s), "start")
                                       for d in self.dev_ids(gi)]
                        self.add(("AGf", s, i, m), "AllGather", s, m, layer,
                                 duration=self.ag_time(s, layer),
                                 lanes=self.lanes(gi, "collective"),
                                 deps=deps, effects=effects)
            else:
                for i, layer in enumerate(layers):
                    deps = []
                    if i > 0:
                        deps.append(("AGf", s, i - 1))
                    if offload and q >= 2:
                        deps.append(("FREEf", self.fwd_stages_of_group(gi)[q - 2]))
                    effects = []
                    if offload:
                        effects = [(d, "params", self.layer_bytes(layer), "start")
                                   for d in self.dev_ids(gi)]
                    self.add(("AGf", s, i), "AllGather", s, -1, layer,
                             duration=self.ag_time(s, layer),
                             lanes=self.lanes(gi, "collective"),
                             deps=deps, effects=effects)

            fwd_t = self.compute_time(s, "fwd")
            for m in range(m_count):
                deps = []
                if per_mb_gather:
                    deps += [("AGf", s, i, m) for i in range(len(layers))]
                else:
                    deps += [("AGf", s, i) for i in range(len(layers))]
                if m > 0:
                    deps.append(("F", s, m - 1))
                if s > 0:
                    if self.group_of(s - 1) == gi:
                        deps.append(("F", s - 1, m))
                    else:
                        deps.append(("PRf", s - 1, m))
                if offload:
                    pos = fwd_pos[gi].index((s, m))
                    if pos >= 2:
                        ps, pm = fwd_pos[gi][pos - 2]
                        deps.append(("OA", ps, pm))
                effects = []
                for d in self.dev_ids(gi):
                    # The materialized-parameter window closes on every group
                    # member, including devices carrying no samples.
                    if per_mb_gather:
                        effects.append((d, "params", -self.z3_window_bytes(s), "end"))
                    u = self.act_unit(gi, d)
                    if u == 0:
                        continue
                    if offload:
                        effects.append((d, "activations", (1 + k_act) * u, "start"))
                        effects.append((d, "activations", -k_act * u, "end"))
                    else:
                        effects.append((d, "activations",
                                        (len(layers) + k_act) * u, "start"))
                        effects.append((d, "activations", -k_act * u, "end"))
                self.add(("F", s, m), "Fwd", s, m,
                         duration=fwd_t, lanes=self.lanes(gi, "compute"),
                         deps=deps, effects=effects)

                if offload:
                    self.add(("OA", s, m), "OffloadAct", s, m,
                             duration=self.act_transfer_time(gi),
                             lanes=self.lanes(gi, "host"),
                             deps=[("F", s, m)],
                             effects=[(d, "activations", -self.act_unit(gi, d), "end")
                                      for d in self.dev_ids(gi)
                                      if self.act_unit(gi, d) > 0])

                if s + 1 < self.n_stages and self.group_of(s + 1) != gi:
                    src, dst, bw = send_link[(s, "f")]
                    self.add(("PSf", s, m), "P2PSend", s, m,
                             duration=boundary_bytes / bw,
                             lanes=((src, "p2p"),), deps=[("F", s, m)])
                    self.add(("PRf", s, m), "P2PRecv", s + 1, m,
                             duration=ctx.comm.p2p_latency,
                             lanes=((dst, "p2p"),), deps=[("PSf", s, m)])

            if offload:
                self.add(("FREEf", s), "FreeParams", s,
                         duration=0.0, lanes=(),
                         deps=[("F", s, m_count - 1)],
                         effects=[(d, "params", -self.chunk_bytes(s), "end")
                                  for d in self.dev_ids(gi)])

        # ---------------- backward pass ----------------
        bwd_pos: Dict[int, List[Tuple[int, int]]] = {
            gi: [(s, m) for s in reversed(self.fwd_stages_of_group(gi))
                 for m in range(m_count)]
            for gi in range(len(plan.groups))
        }
        for s in reversed(range(self.n_stages)):
            gi = self.group_of(s)
            group = plan.groups[gi]
            d_dp = group.d_dp
            layers = list(self.layers_of(s))
            bwd_chunks = [st for st, _ in bwd_pos[gi][:: m_count]]
            r = bwd_chunks.index(s)

            if per_mb_gather:
                for m in range(m_count):
                    for i, layer in enumerate(layers):
                        deps = []
                        if i > 0:
                            deps.append(("AGb", s, i - 1, m))
                        else:
                            deps.append(("F", s, m_count - 1))
                            if m > 0:
                                deps.append(("B", s, m - 1))
                            elif r >= 1:
                                deps.append(("B", bwd_chunks[r - 1], m_count - 1))
                        effects = []
                        if i == 0:
                            effects = [(d, "params", self.z3_window_bytes(s), "start")
                                       for d in self.dev_ids(gi)]
                        self.add(("AGb", s, i, m), "AllGather", s, m, layer,
                                 duration=self.ag_time(s, layer),
                                 lanes=self.lanes(gi, "collective"),
                                 deps=deps, effects=effects)
            else:
                for i, layer in enumerate(layers):
                    deps = []
                    if i > 0:
                        deps.append(("AGb", s, i - 1))
                    elif offload:
                        deps.append(("FREEf", s))
                        if r >= 2:
                            deps.append(("FREEb", bwd_chunks[r - 2]))
                    else:
                        deps.append(("F", s, m_count - 1))
                    effects = []
                    if offload:
                        effects = [(d, "params", self.layer_bytes(layer), "start")
                                   for d in self.dev_ids(gi)]
                    self.add(("AGb", s, i), "AllGather", s, -1, layer,
                             duration=self.ag_time(s, layer),
                             lanes=self.lanes(gi, "collective"),
                             deps=deps, effects=effects)

            recompute_t = self.compute_time(s, "fwd")
            bwd_t = self.compute_time(s, "bwd")
            grad_bytes = self.chunk_bytes(s) / (d_dp if per_mb_gather else 1)
            for m in range(m_count):
                if offload:
                    deps = [("OA", s, m)]
                    pos = bwd_pos[gi].index((s, m))
                    if pos >= 1:
                        ps, pm = bwd_pos[gi][pos - 1]
                        deps.append(("RC", ps, pm))
                    else:
                        # The first checkpoint reload must not stack an extra
                        # unit onto the still-draining forward window.
                        deps.append(("F", s, m_count - 1))
                    self.add(("LA", s, m), "LoadAct", s, m,
                             duration=self.act_transfer_time(gi),
                             lanes=self.lanes(gi, "host"), deps=deps,
                             effects=[(d, "activations", self.act_unit(gi, d), "end")
                                      for d in self.dev_ids(gi)
                                      if self.act_unit(gi, d) > 0])

                deps = [("F", s, m)]
                if m > 0:
                    deps.append(("B", s, m - 1))
                if offload:
                    deps.append(("LA", s, m))
                if per_mb_gather:
                    deps += [("AGb", s, i, m) for i in range(len(layers))]
                else:
                    deps += [("AGb", s, i) for i in range(len(layers))]
                if m == 0 and r >= 1:
                    prev = bwd_chunks[r - 1]
                    deps.append(("RS", prev, len(list(self.layers_of(prev))) - 1))
                effects = [(d, "activations", k_act * self.act_unit(gi, d), "start")
                           for d in self.dev_ids(gi) if self.act_unit(gi, d) > 0]
                self.add(("RC", s, m), "Recompute", s, m,
                         duration=recompute_t, lanes=self.lanes(gi, "compute"),
                         deps=deps, effects=effects)

                deps = [("RC", s, m)]
                if s + 1 < self.n_stages:
                    if self.group_of(s + 1) == gi:
                        deps.append(("B", s + 1, m))
                    else:
                        deps.append(("PRb", s, m))
                effects = []
                if m == 0:
                    effects += [(d, "grads", grad_bytes, "start")
                                for d in self.dev_ids(gi)]
                drop = 1 + k_act if offload else len(layers) + k_act
                effects += [(d, "activations", -drop * self.act_unit(gi, d), "end")
                            for d in self.dev_ids(gi) if self.act_unit(gi, d) > 0]
                if per_mb_gather:
                    effects += [(d, "params", -self.z3_window_bytes(s), "end")
                                for d in self.dev_ids(gi)]
                self.add(("B", s, m), "Bwd", s, m,
                         duration=bwd_t, lanes=self.lanes(gi, "compute"),
                         deps=deps, effects=effects)

                if s > 0 and self.group_of(s - 1) != gi:
                    src, dst, bw = send_link[(s - 1, "b")]
                    self.add(("PSb", s - 1, m), "P2PSend", s, m,
                             duration=boundary_bytes / bw,
                             lanes=((src, "p2p"),), deps=[("B", s, m)])
                    self.add(("PRb", s - 1, m), "P2PRecv", s - 1, m,
                             duration=ctx.comm.p2p_latency,
                             lanes=((dst, "p2p"),), deps=[("PSb", s - 1, m)])

            if offload:
                self.add(("FREEb", s), "FreeParams", s,
                         duration=0.0, lanes=(),
                         deps=[("B", s, m_count - 1)],
                         effects=[(d, "params", -self.chunk_bytes(s), "end")
                                  for d in self.dev_ids(gi)])

            for i, layer in enumerate(layers):
                deps = [("B", s, m_count - 1)]
                if i > 0:
                    deps.append(("RS", s, i - 1))
                effects = []
                if i == len(layers) - 1:
                    effects = [(d, "grads", -grad_bytes, "end")
                               for d in self.dev_ids(gi)]
                self.add(("RS", s, i), "ReduceScatter", s, -1, layer,
                         duration=self.rs_time(s, layer),
                         lanes=self.lanes(gi, "collective"),
                         deps=deps, effects=effects)

        # ---------------- optimizer ----------------
        for s in range(self.n_stages):
            gi = self.group_of(s)
            deps = [("RS", s, i) for i in range(len(list(self.layers_of(s))))]
            if not strategy.offloads:
                # Baselines update once the whole group's backward has reduced.
                for other in self.fwd_stages_of_group(gi):
                    deps += [("RS", other, i)
                             for i in range(len(list(self.layers_of(other))))]
                deps = sorted(set(deps))
            params_local = sum(self.ctx.model.params_of(layer)
                               for layer in self.layers_of(s)) / self.plan.groups[gi].d_dp
            self.add(("OPT", s), "OptimStep", s,
                     duration=params_local * self.ctx.optim_update_per_param,
                     lanes=self.lanes(gi, "compute"), deps=deps)

        for task in self.tasks:
            for dep in task.deps:
                if dep not in self.by_key:
                    raise SimulationError(
                        f"task {task.key} depends on unknown {dep}"
                    )
        return self.tasks


# ---------------------------------------------------------------------------
# Engine


def _initial_memory(ctx: CostContext, plan: TrainingPlan) -> Dict[str, Dict[str, float]]:
    """Resident-from-t=0 state: optimizer shard, persistent gradient buffer,
    and strategy-dependent parameter residency."""
    base: Dict[str, Dict[str, float]] = {}
    elem = ctx.model.bytes_per_element
    ranges = plan.stage_layer_ranges()
    order = plan.global_order()
    for gi, group in enumerate(plan.groups):
        layers = [layer for idx, (g, _) in enumerate(order) if g == gi
                  for layer in range(*ranges[idx])]
        param_count = sum(ctx.model.params_of(layer) for layer in layers)
        param_bytes = param_count * elem
        d_dp = group.d_dp
        for dev in group.devices:
            state = {c: 0.0 for c in CATEGORIES}
            state["optim"] = param_count * ctx.workload.optimizer_bytes_per_param / d_dp
            state["grads"] = param_bytes / d_dp
            if plan.strategy is Strategy.PP_ZERO2:
                state["params"] = param_bytes
            elif plan.strategy is Strategy.PP_ZERO3:
                state["params"] = param_bytes / d_dp
            base[dev.id] = state
    return base


def simulate_plan(ctx: CostContext, plan: TrainingPlan) -> Timeline:
    """Run one iteration of the plan and return its timeline."""
    tasks = _Builder(ctx, plan).build()
    by_key = {t.key: t for t in tasks}
    dependents: Dict[tuple, List[_Task]] = defaultdict(list)
    missing: Dict[tuple, int] = {}
    for t in tasks:
        missing[t.key] = len(t.deps)
        for dep in t.deps:
            dependents[dep].append(t)

    lane_avail: Dict[Tuple[str, str], float] = defaultdict(float)
    dep_ready: Dict[tuple, float] = {t.key: 0.0 for t in tasks}
    ready: List[_Task] = [t for t in tasks if missing[t.key] == 0]
    done: Dict[tuple, float] = {}
    scheduled: List[Tuple[_Task, float, float]] = []

    while ready:
        best = None
        best_sort = None
        for t in ready:
            start = dep_ready[t.key]
            for lane in t.lanes:
                start = max(start, lane_avail[lane])
            sort_key = (start, t.prio)
            if best_sort is None or sort_key < best_sort:
                best_sort = sort_key
                best = t
        start = best_sort[0]
        end = start + best.duration
        for lane in best.lanes:
            lane_avail[lane] = end
        done[best.key] = end
        scheduled.append((best, start, end))
        ready.remove(best)
        for dep_task in dependents[best.key]:
            missing[dep_task.key] -= 1
            dep_ready[dep_task.key] = max(dep_ready[dep_task.key], end)
            if missing[dep_task.key] == 0:
                ready.append(dep_task)

    if len(scheduled) != len(tasks):
        stuck = [t.key for t in tasks if t.key not in done][:8]
        raise SimulationError(
            f"simulation deadlocked with {len(tasks) - len(scheduled)} tasks "
            f"blocked; first stuck: {stuck}"
        )

    iteration_time = max(end for _, _, end in scheduled)

    events = [
        ScheduledEvent(
            kind=t.kind, group=t.group, stage=t.stage, microbatch=t.microbatch,
            layer=t.layer, start=start, end=end,
            device_ids=tuple(d for d, _ in t.lanes) or
            plan.groups[t.group].device_ids,
            lane=t.lanes[0][1] if t.lanes else "none",
        )
        for t, start, end in scheduled
    ]

    counts: Dict[int, Dict[str, int]] = {
        gi: {"allgather": 0, "reduce_scatter": 0} for gi in range(len(plan.groups))
    }
    for t, _, _ in scheduled:
        if t.kind == "AllGather":
            counts[t.group]["allgather"] += 1
        elif t.kind == "ReduceScatter":
            counts[t.group]["reduce_scatter"] += 1

    # Memory: apply deltas in time order, end-effects before start-effects at
    # equal timestamps so a free never creates a phantom peak with the
    # allocation that replaces it.
    deltas: Dict[str, List[Tuple[float, int, int, str, float]]] = defaultdict(list)
    for idx, (t, start, end) in enumerate(scheduled):
        for dev, cat, delta, at in t.effects:
            time = start if at == "start" else end
            phase = 1 if at == "start" else 0
            deltas[dev].append((time, phase, idx, cat, delta))

    base = _initial_memory(ctx, plan)
    peaks: Dict[str, Dict[str, float]] = {}
    traces: Dict[str, List[Tuple[float, float, float, float, float, float]]] = {}
    for gi, group in enumerate(plan.groups):
        for dev in group.devices:
            state = dict(base[dev.id])
            trace = [(0.0, state["params"], state["grads"], state["optim"],
                      state["activations"], sum(state.values()))]
            peak = dict(state)
            peak["total"] = sum(state.values())
            for time, _, _, cat, delta in sorted(deltas.get(dev.id, [])):
                state[cat] += delta
                total = sum(state.values())
                trace.append((time, state["params"], state["grads"],
                              state["optim"], state["activations"], total))
                for c in CATEGORIES:
                    peak[c] = max(peak[c], state[c])
                peak["total"] = max(peak["total"], total)
            for cat, value in state.items():
                if value < -1e-6 or (cat in ("params", "activations")
                                     and abs(value - base[dev.id][cat]) > 1e-6):
                    raise SimulationError(
                        f"memory accounting leak on {dev.id}/{cat}: "
                        f"end state {value}, expected {base[dev.id][cat]}"
                    )
            peaks[dev.id] = peak
            traces[dev.id] = trace

    busy: Dict[Tuple[str, str], float] = defaultdict(float)
    for t, start, end in scheduled:
        for lane in t.lanes:
            busy[lane] += end - start
    busy_frac = {
        lane: (total / iteration_time if iteration_time > 0 else 0.0)
        for lane, total in busy.items()
    }

    return Timeline(
        iteration_time=iteration_time,
        events=events,
        collective_counts=counts,
        memory_peaks=peaks,
        memory_trace=traces,
        busy=busy_frac,
    )
