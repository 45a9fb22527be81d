"""Shared fixture builders and randomized instance generators for the tests."""

from __future__ import annotations

import random

from hybridplan.costmodel import in_flight_microbatches, layer_memory
from hybridplan.profiles import (INTER_NODE, INTRA_NODE, BandwidthEntry, ClusterProfile,
                                 LayerProfile, ModelProfile, TrainingConfig)
from hybridplan.search import SearchConfig, near_equal_split, optimize
from hybridplan.strategy import enumerate_strategies


def bandwidth_table(devices_per_node: int, n_devices: int, *,
                    intra_bw: float = 300e9, intra_lat: float = 1e-6,
                    inter_bw: float = 25e9, inter_lat: float = 5e-6,
                    max_size: int | None = None) -> tuple[BandwidthEntry, ...]:
    """Two-tier table covering every power-of-two group size the search can ask for."""
    entries = []
    size = 2
    while size <= devices_per_node:
        entries.append(BandwidthEntry(INTRA_NODE, size, intra_bw, intra_lat))
        size *= 2
    size = 2
    top = max_size if max_size is not None else n_devices
    while size <= top:
        entries.append(BandwidthEntry(INTER_NODE, size, inter_bw, inter_lat))
        size *= 2
    return tuple(entries)


def make_cluster(n_devices: int = 8, devices_per_node: int = 8, *,
                 device_flops: float = 1e12, device_memory_bytes: int = 32 * 1024 ** 3,
                 memory_reserve_fraction: float = 0.0, **table_kwargs) -> ClusterProfile:
    cluster = ClusterProfile(
        n_devices=n_devices,
        devices_per_node=devices_per_node,
        device_flops=device_flops,
        device_memory_bytes=device_memory_bytes,
        memory_reserve_fraction=memory_reserve_fraction,
        bandwidth_table=bandwidth_table(devices_per_node, n_devices, **table_kwargs),
    )
    cluster.validate()
    return cluster


def random_layer(rng: random.Random, hidden: int) -> LayerProfile:
    params = rng.uniform(1e4, 2e6)
    shard = rng.uniform(4, 40) * hidden
    repl = rng.uniform(2, 16) * hidden
    boundary = min(rng.uniform(0.5, 2.0) * hidden, shard + repl)
    return LayerProfile(
        param_count=params,
        flops_per_token=2.0 * params,
        flops_per_token_sq=rng.uniform(0, 8) * hidden,
        act_shardable_bytes_per_token=shard,
        act_replicated_bytes_per_token=repl,
        boundary_bytes_per_token=boundary,
    )


def random_instance(rng: random.Random, *, max_layers: int = 3,
                    device_memory_bytes: int = 1 << 62):
    """A small random (cluster, model, training) triple with ample memory.

    global_batch is kept at a multiple of n_devices so a data-parallel
    strategy always exists for the full device count.
    """
    n_devices = rng.choice([2, 4, 8])
    devices_per_node = rng.choice([d for d in (1, 2, 4, 8) if d <= n_devices])
    cluster = ClusterProfile(
        n_devices=n_devices,
        devices_per_node=devices_per_node,
        device_flops=10 ** rng.uniform(9, 11),
        device_memory_bytes=device_memory_bytes,
        memory_reserve_fraction=0.0,
        bandwidth_table=bandwidth_table(
            devices_per_node, n_devices,
            intra_bw=10 ** rng.uniform(10.5, 11.5),
            intra_lat=rng.choice([0.0, 1e-7, 1e-6]),
            inter_bw=10 ** rng.uniform(9.5, 10.5),
            inter_lat=rng.choice([0.0, 1e-6, 5e-6]),
        ),
    )
    n_layers = rng.randint(1, max_layers)
    hidden = rng.choice([32, 64, 128])
    seq_len = rng.choice([16, 32, 64])
    model = ModelProfile(n_layers, hidden, seq_len,
                         tuple(random_layer(rng, hidden) for _ in range(n_layers)))
    training = TrainingConfig(global_batch=n_devices * rng.choice([1, 2, 4]))
    cluster.validate()
    model.validate()
    training.validate()
    return cluster, model, training


def with_memory(cluster: ClusterProfile, device_memory_bytes: int) -> ClusterProfile:
    return ClusterProfile(
        n_devices=cluster.n_devices,
        devices_per_node=cluster.devices_per_node,
        device_flops=cluster.device_flops,
        device_memory_bytes=device_memory_bytes,
        memory_reserve_fraction=cluster.memory_reserve_fraction,
        bandwidth_table=cluster.bandwidth_table,
    )


def minimal_peak_bytes(model: ModelProfile, cluster: ClusterProfile,
                       training: TrainingConfig, cfg: SearchConfig) -> int:
    """Smallest per-stage peak any plan can achieve, over all (pp, microbatch).

    Independent reduction over the per-layer memory formula: per stage the
    cheapest strategy is picked layer by layer, the stage peak is their sum,
    a combo's peak is the max across its stages.
    """
    best = None
    pp = 1
    pp_limit = min(cluster.n_devices, model.n_layers)
    if cfg.max_pp is not None:
        pp_limit = min(pp_limit, cfg.max_pp)
    while pp <= pp_limit:
        microbatch = 1
        while microbatch <= training.global_batch:
            strategies = [s for s in enumerate_strategies(
                cluster.n_devices // pp, cluster, cfg.constraints)
                if microbatch % s.dp == 0]
            if strategies:
                m = training.global_batch // microbatch
                combo_peak = 0
                for i, (a, b) in enumerate(near_equal_split(model.n_layers, pp)):
                    in_flight = in_flight_microbatches(pp, i, m)
                    stage_total = 0
                    for layer in model.layers[a:b]:
                        stage_total += min(
                            layer_memory(layer, s, microbatch, model.seq_len,
                                         in_flight, training).total_int()
                            for s in strategies)
                    combo_peak = max(combo_peak, stage_total)
                if best is None or combo_peak < best:
                    best = combo_peak
            microbatch *= 2
        pp *= 2
    if best is None:
        raise ValueError("no combo admits any strategy")
    return best


def draw_binding_memory(rng: random.Random, model: ModelProfile, cluster: ClusterProfile,
                        training: TrainingConfig, cfg: SearchConfig) -> int:
    """Device memory drawn so the budget binds roughly half the time.

    Binding budgets live just above the instance's minimal achievable peak
    (cheap state-sharding reductions are time-free, so only budgets near the
    floor force slower plans).  Half the draws land log-uniformly in that
    zone, half comfortably above the unconstrained plan's peak; neither
    component conditions on any feasibility boundary.
    """
    import math

    free_plan = optimize(model, cluster, training, cfg)
    natural = max(free_plan.predicted_stage_peak_memory)
    floor = minimal_peak_bytes(model, cluster, training, cfg)
    if rng.random() < 0.7:
        lo = max(int(floor * 1.01), 1)
        hi = max(int(floor * 1.25), lo + 1)
    else:
        lo = max(int(natural * 1.0), 1)
        hi = max(int(natural * 1.5), lo + 1)
    return int(math.exp(rng.uniform(math.log(lo), math.log(hi))))
