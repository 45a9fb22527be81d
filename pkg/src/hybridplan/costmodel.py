"""Time and memory costing of layers, stages, and whole iterations.

Times are seconds per microbatch unless noted.  Conventions the rest of the
planner relies on:

- Backward compute is a fixed 2x multiple of forward compute.
- Tensor-parallel traffic is charged as four ring all-reduces per layer per
  microbatch (two forward, two backward).  Under sequence parallelism the
  same volume moves as all-gather + reduce-scatter pairs, which the ring
  identity makes time-equal, so the sp flag changes memory only.
- Sharding stages 1 and 2 move the same synchronization volume as plain
  data parallelism (reduce-scatter + all-gather vs. one all-reduce); only
  stage 3 adds per-microbatch parameter gathers.
- Stage peak memory counts min(n_microbatches, pp - stage_index) in-flight
  activation copies, the warmup depth of the one-forward-one-backward
  pipeline schedule.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from . import collectives
from .collectives import CommGroup, comm_group
from .errors import IndivisibleMicrobatch
from .profiles import ClusterProfile, LayerProfile, ModelProfile, TrainingConfig
from .strategy import ParallelStrategy

# Dense-Transformer backward/forward FLOP ratio.
BACKWARD_FLOP_RATIO = 2.0


@dataclass(frozen=True)
class TimeBreakdown:
    """Seconds per microbatch for one layer under one strategy."""

    fwd_compute: float
    bwd_compute: float
    recompute_extra: float
    tp_comm: float
    zero3_param_gather: float

    def per_microbatch_total(self) -> float:
        return (self.fwd_compute + self.bwd_compute + self.recompute_extra
                + self.tp_comm + self.zero3_param_gather)


@dataclass(frozen=True)
class MemoryBreakdown:
    """Bytes per device for one layer under one strategy."""

    param_bytes: float
    grad_bytes: float
    optimizer_bytes: float
    activation_bytes: float  # includes the in-flight microbatch multiplier

    def total(self) -> float:
        return self.param_bytes + self.grad_bytes + self.optimizer_bytes + self.activation_bytes

    def total_int(self) -> int:
        """Conservative integer byte count used for budget accounting."""
        return int(math.ceil(self.total()))


@dataclass(frozen=True)
class StageCost:
    """Aggregated cost of one pipeline stage."""

    per_microbatch_time: float
    dp_sync_time: float  # per iteration
    peak_memory_bytes: int
    transition_time: float  # per microbatch, already included in per_microbatch_time

    def to_dict(self) -> dict:
        return {
            "per_microbatch_time": self.per_microbatch_time,
            "dp_sync_time": self.dp_sync_time,
            "peak_memory_bytes": self.peak_memory_bytes,
            "transition_time": self.transition_time,
        }


def _check_divisible(microbatch: int, strategy: ParallelStrategy) -> None:
    if microbatch % strategy.dp != 0:
        raise IndivisibleMicrobatch(
            f"microbatch = {microbatch} is not divisible by dp = {strategy.dp}")


def layer_time(
    layer: LayerProfile,
    strategy: ParallelStrategy,
    microbatch: int,
    seq_len: int,
    hidden_size: int,
    cluster: ClusterProfile,
    training: TrainingConfig,
) -> TimeBreakdown:
    """Per-microbatch time of one layer under one strategy."""
    _check_divisible(microbatch, strategy)
    tp, dp = strategy.tp, strategy.dp
    tokens = microbatch * seq_len

    flops = layer.flops_per_token * tokens + layer.flops_per_token_sq * microbatch * seq_len ** 2
    fwd_compute = flops / (tp * dp * cluster.device_flops)
    bwd_compute = BACKWARD_FLOP_RATIO * fwd_compute

    tp_group = comm_group(cluster, tp)
    hidden_bytes = training.bytes_per_param * hidden_size
    tp_volume = 2.0 * tokens * hidden_bytes / dp
    tp_comm_one = collectives.all_reduce_time(tp_group, tp_volume, cluster)
    tp_comm = 4.0 * tp_comm_one  # two forward + two backward collectives

    if strategy.zero_stage == 3:
        dp_group = comm_group(cluster, dp)
        gather_volume = training.bytes_per_param * layer.param_count / tp
        # Parameters are gathered once for forward and once again for backward.
        zero3 = 2.0 * collectives.all_gather_time(dp_group, gather_volume, cluster)
    else:
        zero3 = 0.0

    if strategy.recompute:
        # Replays the forward pass, including its half of the tp traffic.
        recompute_extra = fwd_compute + 2.0 * tp_comm_one
    else:
        recompute_extra = 0.0

    return TimeBreakdown(
        fwd_compute=fwd_compute,
        bwd_compute=bwd_compute,
        recompute_extra=recompute_extra,
        tp_comm=tp_comm,
        zero3_param_gather=zero3,
    )


def layer_memory(
    layer: LayerProfile,
    strategy: ParallelStrategy,
    microbatch: int,
    seq_len: int,
    in_flight: int,
    training: TrainingConfig,
) -> MemoryBreakdown:
    """Per-device bytes of one layer under one strategy.

    Parameters are split tp ways; sharding stage 1 additionally splits the
    optimizer state dp ways, stage 2 the gradients, stage 3 the parameters
    themselves.  Activations hold `in_flight` microbatches; recomputation
    keeps only the layer-input boundary tensor per microbatch.
    """
    if in_flight < 1:
        raise ValueError("in_flight must be >= 1")
    _check_divisible(microbatch, strategy)
    tp, dp, zero = strategy.tp, strategy.dp, strategy.zero_stage

    shard_params = layer.param_count / tp
    param_bytes = training.bytes_per_param * shard_params / (dp if zero == 3 else 1)
    grad_bytes = training.bytes_per_grad * shard_params / (dp if zero >= 2 else 1)
    optimizer_bytes = training.optimizer_bytes_per_param * shard_params / (dp if zero >= 1 else 1)

    tokens_per_replica = microbatch * seq_len / dp
    if strategy.recompute:
        act_per_microbatch = tokens_per_replica * layer.boundary_bytes_per_token
    else:
        replicated_div = tp if strategy.sp else 1
        act_per_microbatch = tokens_per_replica * (
            layer.act_shardable_bytes_per_token / tp
            + layer.act_replicated_bytes_per_token / replicated_div
        )
    return MemoryBreakdown(
        param_bytes=param_bytes,
        grad_bytes=grad_bytes,
        optimizer_bytes=optimizer_bytes,
        activation_bytes=in_flight * act_per_microbatch,
    )


def transition_time(
    prev: ParallelStrategy,
    next_: ParallelStrategy,
    layer_boundary_bytes: float,
    stage_group: CommGroup,
    cluster: ClusterProfile,
) -> float:
    """Redistribution charge between adjacent layers with different layouts.

    Deliberately coarse: a single all-gather of the boundary tensor over the
    whole stage group bounds any actual resharding plan from above.  Layout
    is (tp, dp, sp); a recompute-only difference moves nothing.
    """
    if layer_boundary_bytes < 0:
        raise ValueError("layer_boundary_bytes must be >= 0")
    if prev.same_layout(next_):
        return 0.0
    return collectives.all_gather_time(stage_group, layer_boundary_bytes, cluster)


def layer_dp_sync_time(
    layer: LayerProfile,
    strategy: ParallelStrategy,
    cluster: ClusterProfile,
    training: TrainingConfig,
) -> float:
    """Per-iteration gradient/parameter synchronization time of one layer."""
    dp_group = comm_group(cluster, strategy.dp)
    shard_params = layer.param_count / strategy.tp
    grad_volume = training.bytes_per_grad * shard_params
    if strategy.zero_stage == 0:
        return collectives.all_reduce_time(dp_group, grad_volume, cluster)
    param_volume = training.bytes_per_param * shard_params
    return (collectives.reduce_scatter_time(dp_group, grad_volume, cluster)
            + collectives.all_gather_time(dp_group, param_volume, cluster))


def in_flight_microbatches(pp: int, stage_index: int, n_microbatches: int) -> int:
    """Warmup depth of the stage: microbatches held live at its peak."""
    return min(n_microbatches, pp - stage_index)


def stage_cost(
    layers: list[LayerProfile],
    strategies: list[ParallelStrategy],
    stage_index: int,
    pp: int,
    microbatch: int,
    n_microbatches: int,
    model: ModelProfile,
    cluster: ClusterProfile,
    training: TrainingConfig,
    *,
    transitions: bool = True,
) -> StageCost:
    """Aggregate one stage's layers into per-microbatch time, sync, and peak memory."""
    if len(layers) != len(strategies):
        raise ValueError("layers and strategies must have equal length")
    if n_microbatches < 1:
        raise ValueError("n_microbatches must be >= 1")
    devices_per_stage = strategies[0].tp * strategies[0].dp
    for s in strategies:
        if s.tp * s.dp != devices_per_stage:
            raise ValueError("all strategies in a stage must use the same device count")

    stage_group = comm_group(cluster, devices_per_stage)
    in_flight = in_flight_microbatches(pp, stage_index, n_microbatches)

    per_microbatch = 0.0
    transition_total = 0.0
    dp_sync = 0.0
    peak_memory = 0
    for i, (layer, s) in enumerate(zip(layers, strategies)):
        times = layer_time(layer, s, microbatch, model.seq_len, model.hidden_size,
                           cluster, training)
        step = times.per_microbatch_total()
        if transitions and i > 0:
            boundary_bytes = microbatch * model.seq_len * layer.boundary_bytes_per_token
            trans = transition_time(strategies[i - 1], s, boundary_bytes, stage_group, cluster)
            transition_total += trans
            step += trans
        per_microbatch += step
        dp_sync += layer_dp_sync_time(layer, s, cluster, training)
        mem = layer_memory(layer, s, microbatch, model.seq_len, in_flight, training)
        peak_memory += mem.total_int()

    dp_sync *= (1.0 - training.comm_overlap_fraction)
    return StageCost(
        per_microbatch_time=per_microbatch,
        dp_sync_time=dp_sync,
        peak_memory_bytes=peak_memory,
        transition_time=transition_total,
    )


def iteration_time(
    stage_costs: list[StageCost],
    pp: int,
    n_microbatches: int,
    p2p_times: list[float],
) -> float:
    """Closed-form bound on one iteration of the 1F1B pipeline schedule.

    The slowest stage cycle paces the steady state for n_microbatches - 1
    rounds, one microbatch drains through every stage once, and the largest
    data-parallel sync lands at the end (stages sync concurrently on
    disjoint devices).
    """
    if pp < 1 or len(stage_costs) != pp or len(p2p_times) != pp:
        raise ValueError("stage_costs and p2p_times must have length pp >= 1")
    cycles = [cost.per_microbatch_time + p2p for cost, p2p in zip(stage_costs, p2p_times)]
    max_dp_sync = max(cost.dp_sync_time for cost in stage_costs)
    return (n_microbatches - 1) * max(cycles) + sum(cycles) + max_dp_sync
