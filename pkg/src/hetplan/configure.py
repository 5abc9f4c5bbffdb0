"""Plan construction: turn a cluster partition into a full training plan.

Given the device groups from the min-cut phase, this module decides
everything else about a candidate configuration:

- pipeline order of the groups (fastest internal interconnect first),
- per-group layer counts proportional to measured aggregate speed,
- near-even contiguous ministage sizes within each group,
- per-device microbatch shares that minimize the slowest device's time,
- a per-microbatch sample routing order,
- the microbatch count and ministage granularity swept over candidates.

``plan_training`` enumerates candidates over (partition size, microbatch
count, ministage fraction, strategy), keeps those whose memory estimate fits
every device, and returns the one with the lowest estimated iteration
latency.  Ties prefer fewer groups, then fewer microbatches, then coarser
ministages.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from .costs import (
    CommParams,
    CostContext,
    LatencyEstimate,
    MemoryEstimate,
    Strategy,
    memory_estimate,
    memory_fits,
    total_iteration_latency,
)
from .partition import ClusterGraph, Partition, build_cluster_graph, split_min_k_cut_sequence
from .workload import (
    ClusterProfile,
    GpuDevice,
    LayerRuntimeModel,
    ModelSpec,
    WorkloadSpec,
    aggregate_group_speed,
)

PLAN_FORMAT_VERSION = 1
DEFAULT_MINISTAGE_FRACTIONS = (1.0, 0.5, 0.25, 0.125)
DEFAULT_MAX_MICROBATCHES = 64
# Below this many per-group ministage-count combinations the sweep tries all
# of them; above it, only the fraction ladder plus aligned-round variants.
FULL_COUNT_GRID_LIMIT = 64


class NoFeasiblePlanError(RuntimeError):
    """Raised when no candidate fits in memory on every device."""


class PlanFormatError(ValueError):
    """Raised for malformed or mismatched plan files."""


def cluster_fingerprint(profile: ClusterProfile) -> str:
    """Stable short digest of cluster identity, stored in plan files so a
    plan is never simulated against a different cluster."""
    payload = {
        "devices": sorted(
            (d.id, d.kind, d.peak_tflops, d.mem_capacity, d.node_id, d.region_id)
            for d in profile.devices
        ),
        "intra": sorted(profile.intra_node_bw.items()),
        "inter": sorted((list(k), v) for k, v in profile.inter_node_bw.items()),
    }
    blob = json.dumps(payload, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class GpuGroup:
    """One pipeline stage's worth of devices and their work assignment."""

    devices: Tuple[GpuDevice, ...]
    layers_assigned: int
    ministage_sizes: Tuple[int, ...]
    shares: Dict[str, int]
    aggregate_speed: float
    intra_bw: float

    def __post_init__(self) -> None:
        if not self.devices:
            raise PlanFormatError("group with no devices")
        if sum(self.ministage_sizes) != self.layers_assigned:
            raise PlanFormatError(
                f"ministage sizes {self.ministage_sizes} do not sum to "
                f"{self.layers_assigned} layers"
            )
        if any(s <= 0 for s in self.ministage_sizes):
            raise PlanFormatError("ministage with no layers")
        missing = [d.id for d in self.devices if d.id not in self.shares]
        if missing:
            raise PlanFormatError(f"devices without a microbatch share: {missing}")

    @property
    def device_ids(self) -> Tuple[str, ...]:
        ids = getattr(self, "_device_ids", None)
        if ids is None:
            ids = tuple(d.id for d in self.devices)
            object.__setattr__(self, "_device_ids", ids)
        return ids

    @property
    def d_dp(self) -> int:
        return len(self.devices)


@dataclass
class TrainingPlan:
    """A complete candidate configuration plus its model estimates."""

    groups: Tuple[GpuGroup, ...]
    n_microbatches: int
    microbatch_size: int
    strategy: Strategy
    cluster_fingerprint: str
    latency: Optional[LatencyEstimate] = None
    memory: Optional[Dict[str, MemoryEstimate]] = None
    routing: Optional[List[List[List[Tuple[str, int]]]]] = None
    _order: Optional[List[Tuple[int, int]]] = field(
        default=None, repr=False, init=False, compare=False
    )
    _ranges: Optional[List[Tuple[int, int]]] = field(
        default=None, repr=False, init=False, compare=False
    )

    def __post_init__(self) -> None:
        if self.n_microbatches < 1 or self.microbatch_size < 1:
            raise PlanFormatError("microbatch settings must be positive")
        for g in self.groups:
            total = sum(g.shares[d.id] for d in g.devices)
            if total != self.microbatch_size:
                raise PlanFormatError(
                    f"group shares sum to {total}, expected microbatch size "
                    f"{self.microbatch_size}"
                )

    @property
    def n_ministage_rounds(self) -> int:
        return max(len(g.ministage_sizes) for g in self.groups)

    @property
    def num_layers(self) -> int:
        return sum(g.layers_assigned for g in self.groups)

    def global_order(self) -> List[Tuple[int, int]]:
        """Ministages in pipeline order: round-robin over groups by round,
        skipping groups that have fewer rounds than the current one."""
        if self._order is None:
            order: List[Tuple[int, int]] = []
            for rnd in range(self.n_ministage_rounds):
                for gi, g in enumerate(self.groups):
                    if rnd < len(g.ministage_sizes):
                        order.append((gi, rnd))
            self._order = order
        return self._order

    def stage_layer_ranges(self) -> List[Tuple[int, int]]:
        """Model layers are dealt out contiguously along the global order."""
        if self._ranges is None:
            ranges: List[Tuple[int, int]] = []
            cursor = 0
            for gi, rnd in self.global_order():
                size = self.groups[gi].ministage_sizes[rnd]
                ranges.append((cursor, cursor + size))
                cursor += size
            self._ranges = ranges
        return self._ranges

    # -- serialization ------------------------------------------------------

    def to_json_dict(self) -> dict:
        out: dict = {
            "version": PLAN_FORMAT_VERSION,
            "cluster_fingerprint": self.cluster_fingerprint,
            "strategy": self.strategy.value,
            "n_microbatches": self.n_microbatches,
            "microbatch_size": self.microbatch_size,
            "groups": [
                {
                    "device_ids": list(g.device_ids),
                    "layers_assigned": g.layers_assigned,
                    "ministage_sizes": list(g.ministage_sizes),
                    "shares": {k: g.shares[k] for k in sorted(g.shares)},
                    "aggregate_speed": g.aggregate_speed,
                    "intra_bw": None if math.isinf(g.intra_bw) else g.intra_bw,
                }
                for g in self.groups
            ],
        }
        if self.routing is not None:
            out["routing"] = [
                [[[dev, n] for dev, n in mb] for mb in group_route]
                for group_route in self.routing
            ]
        if self.latency is not None:
            est = self.latency
            out["latency"] = {
                "l_forwards": est.l_forwards,
                "l_backwards": est.l_backwards,
                "l_startup": est.l_startup,
                "n_ministages": est.n_ministages,
                "l_total": est.l_total,
            }
        if self.memory is not None:
            out["memory"] = {
                dev: {
                    "m_params": m.m_params,
                    "m_grads": m.m_grads,
                    "m_optim": m.m_optim,
                    "m_activations": m.m_activations,
                    "m_total": m.m_total,
                }
                for dev, m in sorted(self.memory.items())
            }
        return out

    @classmethod
    def from_json_dict(cls, data: Mapping, profile: ClusterProfile) -> "TrainingPlan":
        if data.get("version") != PLAN_FORMAT_VERSION:
            raise PlanFormatError(f"unsupported plan version {data.get('version')!r}")
        fp = data.get("cluster_fingerprint", "")
        actual = cluster_fingerprint(profile)
        if fp != actual:
            raise PlanFormatError(
                f"plan was built for cluster {fp}, but this profile is {actual}"
            )
        try:
            strategy = Strategy(data["strategy"])
        except (KeyError, ValueError) as exc:
            raise PlanFormatError(f"bad strategy in plan file: {exc}") from exc
        groups = []
        for gd in data["groups"]:
            try:
                devices = tuple(profile.device_by_id(i) for i in gd["device_ids"])
            except KeyError as exc:
                raise PlanFormatError(f"plan references unknown device {exc}") from exc
            bw = gd.get("intra_bw")
            groups.append(
                GpuGroup(
                    devices=devices,
                    layers_assigned=int(gd["layers_assigned"]),
                    ministage_sizes=tuple(int(s) for s in gd["ministage_sizes"]),
                    shares={k: int(v) for k, v in gd["shares"].items()},
                    aggregate_speed=float(gd["aggregate_speed"]),
                    intra_bw=float("inf") if bw is None else float(bw),
                )
            )
        routing = None
        if "routing" in data:
            routing = [
                [[(dev, int(n)) for dev, n in mb] for mb in group_route]
                for group_route in data["routing"]
            ]
        latency = None
        if "latency" in data:
            ld = data["latency"]
            latency = LatencyEstimate(
                l_forwards=float(ld["l_forwards"]),
                l_backwards=float(ld["l_backwards"]),
                l_startup=float(ld["l_startup"]),
                n_ministages=int(ld["n_ministages"]),
            )
        memory = None
        if "memory" in data:
            memory = {
                dev: MemoryEstimate(
                    m_params=float(md["m_params"]),
                    m_grads=float(md["m_grads"]),
                    m_optim=float(md["m_optim"]),
                    m_activations=float(md["m_activations"]),
                )
                for dev, md in data["memory"].items()
            }
        return cls(
            groups=tuple(groups),
            n_microbatches=int(data["n_microbatches"]),
            microbatch_size=int(data["microbatch_size"]),
            strategy=strategy,
            cluster_fingerprint=fp,
            latency=latency,
            memory=memory,
            routing=routing,
        )

    def save(self, path: str) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path: str, profile: ClusterProfile) -> "TrainingPlan":
        with open(path) as fh:
            return cls.from_json_dict(json.load(fh), profile)


# ---------------------------------------------------------------------------
# Assignment heuristics


def proportional_split(
    total: int, weights: Sequence[float], min_each: int = 0
) -> List[int]:
    """Split ``total`` integer units proportionally to ``weights`` by largest
    remainder; ties go to the lower index.  Every slot gets at least
    ``min_each``.  A heavier weight never receives fewer units."""
    n = len(weights)
    if n == 0:
        raise ValueError("cannot split among zero slots")
    if any(w < 0 for w in weights):
        raise ValueError("negative weight")
    if total < min_each * n:
        raise ValueError(f"cannot give {min_each} of {total} units to {n} slots")
    remaining = total - min_each * n
    wsum = float(sum(weights))
    if wsum == 0.0:
        raw = [remaining / n] * n
    else:
        raw = [remaining * w / wsum for w in weights]
    base = [int(math.floor(r)) for r in raw]
    leftover = remaining - sum(base)
    order = sorted(range(n), key=lambda i: (-(raw[i] - base[i]), i))
    for i in order[:leftover]:
        base[i] += 1
    return [min_each + b for b in base]


def partition_layers(speeds: Sequence[float], num_layers: int) -> List[int]:
    """Layer counts per group, proportional to aggregate speed, one minimum."""
    return proportional_split(num_layers, speeds, min_each=1)


def make_ministages(n_layers: int, n_ministages: int) -> Tuple[int, ...]:
    """Near-even contiguous split; any remainder goes to the earliest stages."""
    if not 1 <= n_ministages <= n_layers:
        raise ValueError(
            f"need between 1 and {n_layers} ministages, got {n_ministages}"
        )
    base, rem = divmod(n_layers, n_ministages)
    return tuple(base + 1 if i < rem else base for i in range(n_ministages))


def order_groups(groups: Sequence[GpuGroup]) -> List[GpuGroup]:
    """Pipeline order: best internal interconnect first.  The first and last
    stages carry the extra embedding/head traffic and the startup collectives,
    so they go to the best-connected groups; ties break on device id."""
    return sorted(groups, key=lambda g: (-g.intra_bw, min(g.device_ids)))


def _per_sample_time(runtime: LayerRuntimeModel, dev: GpuDevice, layer_class: str) -> float:
    fit = runtime.fit_for(dev.kind, layer_class)
    return fit.fwd_beta + fit.bwd_beta


def _device_time(runtime: LayerRuntimeModel, dev: GpuDevice, layer_class: str, share: int) -> float:
    if share <= 0:
        return 0.0
    fit = runtime.fit_for(dev.kind, layer_class)
    return fit.fwd_alpha + fit.bwd_alpha + (fit.fwd_beta + fit.bwd_beta) * share


def balance_microbatch(
    devices: Sequence[GpuDevice],
    runtime: LayerRuntimeModel,
    microbatch_size: int,
    layer_class: str = "transformer",
) -> Dict[str, int]:
    """Integer per-device sample shares minimizing the slowest device's
    per-layer time (forward + backward).  Starts from a proportional split on
    marginal rates, then moves single samples off the critical device while
    that strictly helps."""
    if microbatch_size < 1:
        raise ValueError("microbatch size must be positive")
    rates = [1.0 / _per_sample_time(runtime, d, layer_class) for d in devices]
    shares = proportional_split(microbatch_size, rates)

    def worst(s: List[int]) -> float:
        return max(_device_time(runtime, d, layer_class, s[i]) for i, d in enumerate(devices))

    current = worst(shares)
    while True:
        src = max(
            (i for i in range(len(devices)) if shares[i] > 0),
            key=lambda i: (_device_time(runtime, devices[i], layer_class, shares[i]), -i),
        )
        best_move = None
        for dst in range(len(devices)):
            if dst == src:
                continue
            trial = list(shares)
            trial[src] -= 1
            trial[dst] += 1
            t = worst(trial)
            if t < current - 1e-15 and (best_move is None or t < best_move[0]):
                best_move = (t, dst)
        if best_move is None:
            break
        current, dst = best_move
        shares[src] -= 1
        shares[dst] += 1
    return {d.id: shares[i] for i, d in enumerate(devices)}


def route_microbatches(
    shares: Mapping[str, int],
    n_microbatches: int,
    per_sample_time: Mapping[str, float],
) -> List[List[Tuple[str, int]]]:
    """Sample routing per microbatch.  Every microbatch carries the same
    per-device shares; within each microbatch, devices are listed by
    descending remaining runtime so the most-loaded device is served first."""
    remaining = {dev: shares[dev] * n_microbatches * per_sample_time[dev] for dev in shares}
    routed: List[List[Tuple[str, int]]] = []
    for _ in range(n_microbatches):
        order = sorted(shares, key=lambda dev: (-remaining[dev], dev))
        mb = [(dev, shares[dev]) for dev in order if shares[dev] > 0]
        for dev, n in mb:
            remaining[dev] -= n * per_sample_time[dev]
        routed.append(mb)
    return routed


def _dominant_class(model: ModelSpec) -> str:
    counts: Dict[str, int] = {}
    for layer in range(model.num_layers):
        cls = model.class_of(layer)
        counts[cls] = counts.get(cls, 0) + 1
    return max(counts, key=lambda c: (counts[c], c))


def _divisors_up_to(n: int, cap: int) -> List[int]:
    return [d for d in range(1, min(n, cap) + 1) if n % d == 0]


def _group_intra_bw(graph: ClusterGraph, device_ids: Sequence[str]) -> float:
    if len(device_ids) == 1:
        return float("inf")
    slots = [graph.index_of(d) for d in device_ids]
    return min(
        float(graph.weights[slots[a], slots[b]])
        for a in range(len(slots))
        for b in range(a + 1, len(slots))
    )


@dataclass(frozen=True)
class CandidateRecord:
    """One scored candidate, for reporting."""

    k: int
    n_microbatches: int
    ministage_counts: Tuple[int, ...]
    strategy: Strategy
    feasible: bool
    l_total: float


def build_plan(
    ctx: CostContext,
    profile: ClusterProfile,
    partition: Partition,
    n_microbatches: int,
    ministage_counts: Sequence[int],
    strategy: Strategy,
    fingerprint: str,
    layer_class: str,
) -> TrainingPlan:
    """Assemble one concrete plan for a fixed partition and knob setting.

    ``ministage_counts`` is per group in pipeline order (after sorting by
    interconnect).
    """
    microbatch_size = ctx.workload.global_batch // n_microbatches
    profile_order = {d.id: i for i, d in enumerate(profile.devices)}

    proto = []
    for members in partition.groups:
        devs = tuple(sorted((profile.device_by_id(i) for i in members), key=lambda d: profile_order[d.id]))
        shares = balance_microbatch(devs, ctx.runtime, microbatch_size, layer_class)
        speed = aggregate_group_speed(devs, ctx.runtime, microbatch_size, layer_class)
        proto.append(
            GpuGroup(
                devices=devs,
                layers_assigned=len(devs),  # placeholder, fixed below
                ministage_sizes=(len(devs),),
                shares=shares,
                aggregate_speed=speed,
                intra_bw=_group_intra_bw(ctx.graph, [d.id for d in devs]),
            )
        )
    proto = order_groups(proto)
    layer_counts = partition_layers([g.aggregate_speed for g in proto], ctx.model.num_layers)
    groups = []
    for g, layers, s_g in zip(proto, layer_counts, ministage_counts):
        groups.append(
            GpuGroup(
                devices=g.devices,
                layers_assigned=layers,
                ministage_sizes=make_ministages(layers, s_g),
                shares=g.shares,
                aggregate_speed=g.aggregate_speed,
                intra_bw=g.intra_bw,
            )
        )
    return TrainingPlan(
        groups=tuple(groups),
        n_microbatches=n_microbatches,
        microbatch_size=microbatch_size,
        strategy=strategy,
        cluster_fingerprint=fingerprint,
    )


def _ministage_count_sets(
    layer_counts: Sequence[int],
    fractions: Sequence[float],
) -> List[Tuple[int, ...]]:
    """Candidate per-group ministage counts for one (partition, M) skeleton.

    Always includes the fraction ladder (count = ceil(fraction * layers per
    group)) and, for each ladder rung, the aligned variant where every group
    targets the same round count (clamped to its layer count) so no group
    sits idle in trailing rounds.  When the full per-group grid is small the
    sweep is exhaustive instead, making selection on toy clusters a true
    minimum over every expressible count combination.
    """
    seen: set = set()
    out: List[Tuple[int, ...]] = []

    def add(counts: Tuple[int, ...]) -> None:
        if counts not in seen:
            seen.add(counts)
            out.append(counts)

    grid_size = 1
    for n_layers in layer_counts:
        grid_size *= n_layers
        if grid_size > FULL_COUNT_GRID_LIMIT:
            break
    if grid_size <= FULL_COUNT_GRID_LIMIT:
        for combo in itertools.product(*(range(1, n + 1) for n in layer_counts)):
            add(combo)
        return out

    for fraction in fractions:
        counts = tuple(max(1, math.ceil(fraction * n)) for n in layer_counts)
        add(counts)
        target = max(counts)
        add(tuple(min(target, n) for n in layer_counts))
    return out


def enumerate_candidates(
    ctx: CostContext,
    profile: ClusterProfile,
    partitions: Sequence[Partition],
    strategies: Sequence[Strategy],
    *,
    max_microbatches: int = DEFAULT_MAX_MICROBATCHES,
    ministage_fractions: Sequence[float] = DEFAULT_MINISTAGE_FRACTIONS,
    headroom: float = 0.9,
) -> Iterable[Tuple[TrainingPlan, CandidateRecord]]:
    """Yield every scored candidate plan with its summary record."""
    layer_class = _dominant_class(ctx.model)
    fingerprint = cluster_fingerprint(profile)
    for partition in partitions:
        if partition.k > ctx.model.num_layers:
            continue
        for m in _divisors_up_to(ctx.workload.global_batch, max_microbatches):
            # Layer counts depend on group speeds at this microbatch size, so
            # build a fraction-independent skeleton once per (partition, M).
            skeleton = build_plan(
                ctx, profile, partition, m, [1] * partition.k, strategies[0],
                fingerprint, layer_class,
            )
            layer_counts = [g.layers_assigned for g in skeleton.groups]
            for counts in _ministage_count_sets(layer_counts, ministage_fractions):
                for strategy in strategies:
                    plan = TrainingPlan(
                        groups=tuple(
                            GpuGroup(
                                devices=g.devices,
                                layers_assigned=g.layers_assigned,
                                ministage_sizes=make_ministages(g.layers_assigned, s_g),
                                shares=g.shares,
                                aggregate_speed=g.aggregate_speed,
                                intra_bw=g.intra_bw,
                            )
                            for g, s_g in zip(skeleton.groups, counts)
                        ),
                        n_microbatches=m,
                        microbatch_size=skeleton.microbatch_size,
                        strategy=strategy,
                        cluster_fingerprint=fingerprint,
                    )
                    # Devices with equal share within a group have identical
                    # estimates; compute each distinct share once.
                    plan.memory = {}
                    for gi, g in enumerate(plan.groups):
                        by_share: Dict[int, MemoryEstimate] = {}
                        for dev in g.devices:
                            share = g.shares[dev.id]
                            if share not in by_share:
                                by_share[share] = memory_estimate(ctx, plan, gi, dev.id)
                            plan.memory[dev.id] = by_share[share]
                    feasible = all(
                        memory_fits(plan.memory[dev.id], dev, headroom)
                        for g in plan.groups
                        for dev in g.devices
                    )
                    plan.latency = total_iteration_latency(ctx, plan)
                    record = CandidateRecord(
                        k=partition.k,
                        n_microbatches=m,
                        ministage_counts=counts,
                        strategy=strategy,
                        feasible=feasible,
                        l_total=plan.latency.l_total,
                    )
                    yield plan, record


def select_plan(
    scored: Iterable[Tuple[TrainingPlan, CandidateRecord]]
) -> Tuple[TrainingPlan, List[CandidateRecord]]:
    """Lowest estimated latency among feasible candidates.  Ties prefer fewer
    groups, then fewer microbatches, then fewer ministage rounds."""
    best: Optional[Tuple[tuple, TrainingPlan]] = None
    records: List[CandidateRecord] = []
    for plan, record in scored:
        records.append(record)
        if not record.feasible:
            continue
        key = (
            record.l_total,
            record.k,
            record.n_microbatches,
            sum(record.ministage_counts),
        )
        if best is None or key < best[0]:
            best = (key, plan)
    if best is None:
        raise NoFeasiblePlanError(
            "no feasible plan: every candidate exceeds device memory headroom"
        )
    return best[1], records


def plan_training(
    profile: ClusterProfile,
    model: ModelSpec,
    workload: WorkloadSpec,
    runtime: LayerRuntimeModel,
    *,
    strategies: Sequence[Strategy] = (Strategy.INTERLEAVED,),
    k_max: Optional[int] = None,
    headroom: float = 0.9,
    comm: CommParams = CommParams(),
    k_act: float = 2.0,
    optim_update_per_param: float = 1e-10,
    host_transfer_bw: float = 12e9,
    max_microbatches: int = DEFAULT_MAX_MICROBATCHES,
    ministage_fractions: Sequence[float] = DEFAULT_MINISTAGE_FRACTIONS,
) -> Tuple[TrainingPlan, List[CandidateRecord]]:
    """End-to-end search: partition sequence, candidate sweep, selection.

    Also attaches the sample routing for the selected plan.
    """
    graph = build_cluster_graph(profile)
    ctx = CostContext(
        graph=graph, runtime=runtime, model=model, workload=workload, comm=comm,
        k_act=k_act, optim_update_per_param=optim_update_per_param,
        host_transfer_bw=host_transfer_bw,
    )
    if k_max is None:
        k_max = min(len(profile.devices), model.num_layers, 8)
    partitions = split_min_k_cut_sequence(graph, k_max)
    best, records = select_plan(
        enumerate_candidates(
            ctx,
            profile,
            partitions,
            strategies,
            max_microbatches=max_microbatches,
            ministage_fractions=ministage_fractions,
            headroom=headroom,
        )
    )
    layer_class = _dominant_class(model)
    best.routing = [
        route_microbatches(
            g.shares,
            best.n_microbatches,
            {d.id: _per_sample_time(runtime, d, layer_class) for d in g.devices},
        )
        for g in best.groups
    ]
    return best, records
