"""Automatic hybrid-parallelism planner and validator for Transformer training.

Given a hardware profile and a model profile, the search picks, per layer,
a combination of data / tensor / pipeline / sharded-data / sequence
parallelism and recomputation that minimizes predicted iteration time under
per-device memory budgets, and a discrete-event pipeline simulator verifies
the chosen plan.
"""

from .errors import (IndivisibleMicrobatch, InconsistentStrategy, Infeasible,
                     InvalidDeviceCount, NoBandwidthEntry, NoFeasiblePlan,
                     OracleTooLarge, ParseError, PlannerError, SchedulingDeadlock,
                     ValidationError)
from .profiles import (BandwidthEntry, ClusterProfile, LayerProfile, ModelProfile,
                       TrainingConfig, load_cluster_profile, load_model_profile,
                       load_training_config, lookup_bandwidth, save_profiles,
                       synth_transformer_profile)
from .collectives import (CommGroup, all_gather_time, all_reduce_time, comm_group,
                          p2p_time, reduce_scatter_time)
from .strategy import ParallelStrategy, StrategyConstraints, enumerate_strategies, \
    strategy_dp_degree
from .costmodel import (MemoryBreakdown, StageCost, TimeBreakdown, iteration_time,
                        layer_memory, layer_time, stage_cost, transition_time)
from .search import (Plan, SearchConfig, SearchReport, brute_force_optimize,
                     dp_optimize_stage, make_plan, optimize, optimize_with_report,
                     validate_plan)
from .pipesim import SimEvent, SimResult, compare_with_analytic, simulate

__version__ = "0.1.0"

__all__ = [
    "BandwidthEntry", "ClusterProfile", "CommGroup", "IndivisibleMicrobatch",
    "InconsistentStrategy", "Infeasible", "InvalidDeviceCount", "LayerProfile",
    "MemoryBreakdown", "ModelProfile", "NoBandwidthEntry", "NoFeasiblePlan",
    "OracleTooLarge", "ParallelStrategy", "ParseError", "Plan", "PlannerError",
    "SchedulingDeadlock", "SearchConfig", "SearchReport", "SimEvent", "SimResult",
    "StageCost", "StrategyConstraints", "TimeBreakdown", "TrainingConfig",
    "ValidationError", "all_gather_time", "all_reduce_time", "brute_force_optimize",
    "comm_group", "compare_with_analytic", "dp_optimize_stage", "enumerate_strategies",
    "iteration_time", "layer_memory", "layer_time", "load_cluster_profile",
    "load_model_profile", "load_training_config", "lookup_bandwidth", "make_plan", "optimize",
    "optimize_with_report", "p2p_time", "reduce_scatter_time", "save_profiles",
    "simulate", "stage_cost", "strategy_dp_degree", "synth_transformer_profile",
    "transition_time", "validate_plan",
]
