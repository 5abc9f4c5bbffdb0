"""Cluster, model, and workload descriptions plus per-layer runtime fitting.

Everything downstream (partitioning, cost models, the schedule simulator)
consumes the types defined here:

- ``GpuDevice`` / ``ClusterProfile``: devices, link bandwidths, and measured
  per-layer runtime samples keyed by (gpu_kind, layer_class).
- ``ModelSpec`` / ``WorkloadSpec``: layer counts and sizes, global batch,
  sequence length, precision.
- ``LayerRuntimeModel``: affine per-layer runtimes ``t(b) = alpha + beta * b``
  fitted from the profile's samples, plus the aggregate layers/sec speed of a
  device group used by the layer-apportionment heuristic.

Bandwidths are bytes/sec.  Memory capacities are bytes.  Runtimes are seconds.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Sequence, Tuple

import numpy as np

PRECISION_BYTES = {"half": 2, "single": 4}


class ProfileError(ValueError):
    """Raised for malformed or incomplete cluster/model/workload inputs."""


@dataclass(frozen=True)
class GpuDevice:
    """One GPU: identity, speed class, memory, and placement."""

    id: str
    kind: str
    peak_tflops: float
    mem_capacity: int  # bytes
    node_id: str
    region_id: str


@dataclass
class ClusterProfile:
    """Devices plus measured link bandwidths and runtime samples.

    ``intra_node_bw`` maps node_id -> bytes/sec between GPUs on that node.
    ``inter_node_bw`` maps an (a, b) node pair (a < b) -> bytes/sec; loading
    symmetrizes asymmetric measurements to the minimum of the two directions.
    ``runtime_samples`` maps (gpu_kind, layer_class) -> [(batch, fwd_s, bwd_s)].
    """

    devices: Tuple[GpuDevice, ...]
    intra_node_bw: Dict[str, float]
    inter_node_bw: Dict[Tuple[str, str], float]
    runtime_samples: Dict[Tuple[str, str], List[Tuple[float, float, float]]] = field(
        default_factory=dict
    )

    def __post_init__(self) -> None:
        self.devices = tuple(self.devices)
        seen = set()
        for dev in self.devices:
            if dev.id in seen:
                raise ProfileError(f"duplicate device id {dev.id!r}")
            seen.add(dev.id)
        if not self.devices:
            raise ProfileError("profile has no devices")
        for node, bw in self.intra_node_bw.items():
            if bw <= 0:
                raise ProfileError(f"non-positive intra-node bandwidth for node {node!r}")
        for pair, bw in self.inter_node_bw.items():
            if bw <= 0:
                raise ProfileError(f"non-positive inter-node bandwidth for pair {pair!r}")

    def device_by_id(self, dev_id: str) -> GpuDevice:
        for dev in self.devices:
            if dev.id == dev_id:
                return dev
        raise KeyError(dev_id)

    def kinds(self) -> Tuple[str, ...]:
        out: List[str] = []
        for dev in self.devices:
            if dev.kind not in out:
                out.append(dev.kind)
        return tuple(out)

    def node_ids(self) -> Tuple[str, ...]:
        out: List[str] = []
        for dev in self.devices:
            if dev.node_id not in out:
                out.append(dev.node_id)
        return tuple(out)

    def bandwidth(self, dev_a: GpuDevice, dev_b: GpuDevice) -> float:
        """Link bandwidth between two devices (intra-node or the node pair's link)."""
        if dev_a.node_id == dev_b.node_id:
            try:
                return self.intra_node_bw[dev_a.node_id]
            except KeyError:
                raise ProfileError(f"no intra-node bandwidth for node {dev_a.node_id!r}")
        key = tuple(sorted((dev_a.node_id, dev_b.node_id)))
        try:
            return self.inter_node_bw[key]  # type: ignore[index]
        except KeyError:
            raise ProfileError(f"no inter-node bandwidth for node pair {key!r}")


@dataclass(frozen=True)
class ModelSpec:
    """Layered model description.

    ``params_per_layer`` maps layer_class -> parameter count.  The default is a
    single uniform class; ``layer_class_map`` may name each layer's class
    explicitly (length ``num_layers``) when embedding/head layers differ.
    """

    num_layers: int
    params_per_layer: Mapping[str, int]
    hidden_size: int
    bytes_per_element: int
    layer_classes: Tuple[str, ...] = ("transformer",)
    layer_class_map: Tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        if self.num_layers < 1:
            raise ProfileError("num_layers must be >= 1")
        if self.bytes_per_element not in (1, 2, 4):
            raise ProfileError("bytes_per_element must be 1, 2, or 4")
        for cls in self.layer_classes:
            if cls not in self.params_per_layer:
                raise ProfileError(f"no params_per_layer entry for layer class {cls!r}")
        if self.layer_class_map is not None:
            if len(self.layer_class_map) != self.num_layers:
                raise ProfileError("layer_class_map length must equal num_layers")
            for cls in self.layer_class_map:
                if cls not in self.params_per_layer:
                    raise ProfileError(f"unknown layer class {cls!r} in layer_class_map")

    @classmethod
    def uniform(
        cls,
        num_layers: int,
        params_per_layer: int,
        hidden_size: int,
        bytes_per_element: int,
        layer_class: str = "transformer",
    ) -> "ModelSpec":
        return cls(
            num_layers=num_layers,
            params_per_layer={layer_class: int(params_per_layer)},
            hidden_size=hidden_size,
            bytes_per_element=bytes_per_element,
            layer_classes=(layer_class,),
        )

    def class_of(self, layer_index: int) -> str:
        if not 0 <= layer_index < self.num_layers:
            raise IndexError(layer_index)
        if self.layer_class_map is not None:
            return self.layer_class_map[layer_index]
        return self.layer_classes[0]

    def params_of(self, layer_index: int) -> int:
        return int(self.params_per_layer[self.class_of(layer_index)])

    def total_params(self) -> int:
        return sum(self.params_of(i) for i in range(self.num_layers))


@dataclass(frozen=True)
class WorkloadSpec:
    """Global batch (samples), sequence length, precision, optimizer width."""

    global_batch: int
    seq_len: int
    precision: str = "half"
    optimizer_bytes_per_param: int = 12

    def __post_init__(self) -> None:
        if self.global_batch < 1:
            raise ProfileError("global_batch must be >= 1")
        if self.seq_len < 1:
            raise ProfileError("seq_len must be >= 1")
        if self.precision not in PRECISION_BYTES:
            raise ProfileError(
                f"precision must be one of {sorted(PRECISION_BYTES)}, got {self.precision!r}"
            )

    @property
    def batch_tokens(self) -> int:
        return self.global_batch * self.seq_len


@dataclass(frozen=True)
class LayerFit:
    """Affine runtime fit for one (gpu_kind, layer_class): t(b) = alpha + beta*b."""

    fwd_alpha: float
    fwd_beta: float
    bwd_alpha: float
    bwd_beta: float


@dataclass
class LayerRuntimeModel:
    """Per-(gpu_kind, layer_class) affine runtime predictors."""

    fits: Dict[Tuple[str, str], LayerFit]

    def fit_for(self, gpu_kind: str, layer_class: str) -> LayerFit:
        try:
            return self.fits[(gpu_kind, layer_class)]
        except KeyError:
            raise KeyError(
                f"no runtime fit for GPU kind {gpu_kind!r}, layer class {layer_class!r}"
            )

    def predict(
        self, gpu_kind: str, layer_class: str, batch: float, direction: str = "fwd"
    ) -> float:
        return predict_layer_runtime(self, gpu_kind, layer_class, batch, direction)


def _affine_fit(batches: Sequence[float], times: Sequence[float], label: str) -> Tuple[float, float]:
    """Least-squares (alpha, beta) for t = alpha + beta*b with positivity repairs.

    A negative slope (noisy profile) is clamped to 0 and alpha refit as the
    mean; a negative intercept is clamped to 0 with beta refit through the
    origin.  Either repair warns: the profile disagrees with the affine form.
    """
    b = np.asarray(batches, dtype=float)
    t = np.asarray(times, dtype=float)
    if len(b) < 2 or len(set(b.tolist())) < 2:
        raise ProfileError(f"{label}: need samples at >= 2 distinct batch sizes")
    if np.any(t <= 0):
        raise ProfileError(f"{label}: non-positive runtime sample")
    beta, alpha = np.polyfit(b, t, 1)
    if beta < 0:
        warnings.warn(f"{label}: negative fitted slope {beta:.3e} clamped to 0")
        beta = 0.0
        alpha = float(np.mean(t))
    elif alpha < 0:
        warnings.warn(f"{label}: negative fitted intercept {alpha:.3e} clamped to 0")
        alpha = 0.0
        beta = float(np.sum(t * b) / np.sum(b * b))
    alpha, beta = float(alpha), float(beta)
    if alpha + beta <= 0:
        raise ProfileError(f"{label}: fit predicts non-positive runtime at batch 1")
    return alpha, beta


def fit_layer_runtime(
    samples: Sequence[Tuple[float, float, float]], label: str = "samples"
) -> LayerFit:
    """Fit fwd/bwd affine runtimes from (batch, fwd_s, bwd_s) samples."""
    batches = [s[0] for s in samples]
    fa, fb = _affine_fit(batches, [s[1] for s in samples], f"{label}/fwd")
    ba, bb = _affine_fit(batches, [s[2] for s in samples], f"{label}/bwd")
    return LayerFit(fwd_alpha=fa, fwd_beta=fb, bwd_alpha=ba, bwd_beta=bb)


def fit_runtime_model(profile: ClusterProfile) -> LayerRuntimeModel:
    """Fit every (gpu_kind, layer_class) series in the profile."""
    fits = {}
    for (kind, cls), series in sorted(profile.runtime_samples.items()):
        fits[(kind, cls)] = fit_layer_runtime(series, label=f"{kind}/{cls}")
    missing = [k for k in profile.kinds() if not any(key[0] == k for key in fits)]
    if missing:
        raise ProfileError(f"missing samples for GPU kind(s) {missing}")
    return LayerRuntimeModel(fits=fits)


def predict_layer_runtime(
    model: LayerRuntimeModel, gpu_kind: str, layer_class: str, batch: float, direction: str = "fwd"
) -> float:
    """Predicted per-layer time at an integer batch >= 1."""
    if batch < 1:
        raise ValueError(f"batch must be >= 1, got {batch}")
    fit = model.fit_for(gpu_kind, layer_class)
    if direction == "fwd":
        return fit.fwd_alpha + fit.fwd_beta * batch
    if direction == "bwd":
        return fit.bwd_alpha + fit.bwd_beta * batch
    raise ValueError(f"direction must be 'fwd' or 'bwd', got {direction!r}")


def _fwd_time_at(fit: LayerFit, share: float) -> float:
    # Internal: allows fractional shares (no >=1 precondition) for speed iteration.
    return fit.fwd_alpha + fit.fwd_beta * share


def aggregate_group_speed(
    devices: Sequence[GpuDevice],
    runtime_model: LayerRuntimeModel,
    batch: float,
    layer_class: str = "transformer",
) -> float:
    """Aggregate forward layers/sec of a device group at a given batch.

    The group splits each batch across members, so each device's rate is
    evaluated at its share.  Shares proportional to speed are themselves
    speed-dependent with affine runtimes; three fixed-point iterations from
    equal shares settle the split, then the group speed is the sum of member
    rates.  With batch-independent runtimes this reduces to sum(1/t_fwd).
    """
    if not devices:
        raise ValueError("empty device group")
    fits = [runtime_model.fit_for(d.kind, layer_class) for d in devices]
    shares = np.full(len(devices), batch / len(devices), dtype=float)
    for _ in range(3):
        rates = np.array([1.0 / _fwd_time_at(f, s) for f, s in zip(fits, shares)])
        shares = batch * rates / rates.sum()
    rates = np.array([1.0 / _fwd_time_at(f, s) for f, s in zip(fits, shares)])
    return float(rates.sum())


def _require(mapping: Mapping, key: str, where: str):
    if key not in mapping:
        raise ProfileError(f"{where}: missing required key {key!r}")
    return mapping[key]


def load_cluster_profile(path: str) -> ClusterProfile:
    """Load and validate a cluster profile JSON file.

    Checks: unique device ids, intra-node bandwidth for every node, an
    inter-node bandwidth for every node pair (asymmetric entries are
    symmetrized to the minimum), and runtime samples covering every present
    GPU kind for every sampled layer class.
    """
    try:
        with open(path) as f:
            raw = json.load(f)
    except OSError as exc:
        raise ProfileError(f"cannot read cluster profile {path!r}: {exc}")
    except json.JSONDecodeError as exc:
        raise ProfileError(f"cluster profile {path!r} is not valid JSON: {exc}")

    devices = []
    for entry in _require(raw, "devices", path):
        devices.append(
            GpuDevice(
                id=str(_require(entry, "id", "device")),
                kind=str(_require(entry, "kind", "device")),
                peak_tflops=float(_require(entry, "peak_tflops", "device")),
                mem_capacity=int(_require(entry, "mem_capacity", "device")),
                node_id=str(_require(entry, "node_id", "device")),
                region_id=str(_require(entry, "region_id", "device")),
            )
        )

    intra = {str(k): float(v) for k, v in _require(raw, "intra_node_bw", path).items()}

    inter: Dict[Tuple[str, str], float] = {}
    for a, row in _require(raw, "inter_node_bw", path).items():
        for b, bw in row.items():
            if a == b:
                raise ProfileError(f"inter_node_bw entry for node {a!r} with itself")
            key = tuple(sorted((str(a), str(b))))
            bw = float(bw)
            # Symmetrize to the slower direction when both are given.
            inter[key] = min(inter.get(key, bw), bw)

    samples: Dict[Tuple[str, str], List[Tuple[float, float, float]]] = {}
    for kind, per_class in _require(raw, "runtime_samples", path).items():
        for cls, series in per_class.items():
            samples[(str(kind), str(cls))] = [
                (float(s[0]), float(s[1]), float(s[2])) for s in series
            ]

    profile = ClusterProfile(
        devices=tuple(devices),
        intra_node_bw=intra,
        inter_node_bw=inter,
        runtime_samples=samples,
    )

    nodes = profile.node_ids()
    for node in nodes:
        if node not in intra:
            raise ProfileError(f"missing intra_node_bw for node {node!r}")
    for i, a in enumerate(nodes):
        for b in nodes[i + 1 :]:
            if tuple(sorted((a, b))) not in inter:
                raise ProfileError(f"missing inter_node_bw for node pair ({a!r}, {b!r})")

    classes = sorted({cls for (_, cls) in samples})
    if not classes:
        raise ProfileError(f"{path}: runtime_samples is empty")
    for kind in profile.kinds():
        for cls in classes:
            if (kind, cls) not in samples:
                raise ProfileError(
                    f"missing samples for GPU kind {kind!r}, layer class {cls!r}"
                )
    return profile


def load_model_workload(path: str) -> Tuple[ModelSpec, WorkloadSpec]:
    """Load a model/workload JSON file into (ModelSpec, WorkloadSpec)."""
    try:
        with open(path) as f:
            raw = json.load(f)
    except OSError as exc:
        raise ProfileError(f"cannot read model file {path!r}: {exc}")
    except json.JSONDecodeError as exc:
        raise ProfileError(f"model file {path!r} is not valid JSON: {exc}")

    ppl = _require(raw, "params_per_layer", path)
    if isinstance(ppl, Mapping):
        params = {str(k): int(v) for k, v in ppl.items()}
        classes = tuple(sorted(params))
    else:
        params = {"transformer": int(ppl)}
        classes = ("transformer",)
    class_map = raw.get("layer_class_map")
    model = ModelSpec(
        num_layers=int(_require(raw, "num_layers", path)),
        params_per_layer=params,
        hidden_size=int(_require(raw, "hidden_size", path)),
        bytes_per_element=int(_require(raw, "bytes_per_element", path)),
        layer_classes=classes,
        layer_class_map=tuple(class_map) if class_map is not None else None,
    )
    workload = WorkloadSpec(
        global_batch=int(_require(raw, "global_batch", path)),
        seq_len=int(_require(raw, "seq_len", path)),
        precision=str(raw.get("precision", "half")),
        optimizer_bytes_per_param=int(raw.get("optimizer_bytes_per_param", 12)),
    )
    if PRECISION_BYTES[workload.precision] != model.bytes_per_element:
        warnings.warn(
            f"{path}: precision {workload.precision!r} implies "
            f"{PRECISION_BYTES[workload.precision]} bytes/element but model declares "
            f"{model.bytes_per_element}"
        )
    return model, workload
