"""Planner and schedule simulator for training on heterogeneous GPU clusters.

Pipeline: partition the cluster into device groups along slow links
(``partition``), configure layers/ministages/microbatches per group with
analytic cost models (``configure`` + ``costs``), then validate chosen plans
against a deterministic discrete-event pipeline simulator (``simulate``).
The ``hetplan`` CLI exposes partition/plan/simulate/report subcommands.
"""

from .workload import (
    ClusterProfile,
    GpuDevice,
    LayerRuntimeModel,
    ModelSpec,
    ProfileError,
    WorkloadSpec,
    aggregate_group_speed,
    fit_layer_runtime,
    fit_runtime_model,
    load_cluster_profile,
    load_model_workload,
    predict_layer_runtime,
)
from .partition import (
    MINCUT_BACKEND,
    ClusterGraph,
    Partition,
    build_cluster_graph,
    exact_min_k_cut,
    min_2cut,
    split_min_k_cut_sequence,
)

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
from .configure import (
    GpuGroup,
    NoFeasiblePlanError,
    TrainingPlan,
    plan_training,
)
from .simulate import SimulationError, Timeline, simulate_plan

__version__ = "0.1.0"

__all__ = [
    "ClusterProfile",
    "GpuDevice",
    "LayerRuntimeModel",
    "ModelSpec",
    "ProfileError",
    "WorkloadSpec",
    "aggregate_group_speed",
    "fit_layer_runtime",
    "fit_runtime_model",
    "load_cluster_profile",
    "load_model_workload",
    "predict_layer_runtime",
    "MINCUT_BACKEND",
    "ClusterGraph",
    "Partition",
    "build_cluster_graph",
    "exact_min_k_cut",
    "min_2cut",
    "split_min_k_cut_sequence",
    "CommParams",
    "CostContext",
    "LatencyEstimate",
    "MemoryEstimate",
    "Strategy",
    "memory_estimate",
    "memory_fits",
    "total_iteration_latency",
    "GpuGroup",
    "NoFeasiblePlanError",
    "TrainingPlan",
    "plan_training",
    "SimulationError",
    "Timeline",
    "simulate_plan",
    "__version__",
]
