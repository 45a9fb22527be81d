"""Discrete-event simulator for the one-forward-one-backward pipeline schedule.

Executes a plan in simulated time to validate the analytical cost model.
Each stage runs warmup forwards to depth min(n_microbatches, pp - stage),
then strict 1F1B alternation, then cooldown backwards.  A stage is a
sequential machine: its compute events never overlap, and by default
boundary transfers serialize with compute on the sending stage (an overlap
flag lifts that).  Event times accumulate as exact rationals so balanced
schedules reproduce closed-form makespans with zero error.

Memory accounting charges one microbatch's activation footprint at forward
start and releases it at backward end.  Recomputation keeps only the
boundary tensor in flight; the replayed intermediates are treated as
consumed as they are produced, so the peak is governed by the observed
in-flight depth, and stage peaks are evaluated through the same per-layer
formula the cost model uses (the observed depth never exceeds the warmup
depth, so the simulated peak never exceeds the analytical bound).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

from . import collectives, costmodel
from .errors import SchedulingDeadlock, ValidationError
from .profiles import ClusterProfile, ModelProfile, TrainingConfig
from .search import Plan, stage_p2p_times, validate_plan

EVENT_KINDS = ("fwd", "bwd", "recompute", "p2p_send", "p2p_recv", "dp_sync")
_KIND_ORDER = {kind: i for i, kind in enumerate(EVENT_KINDS)}


@dataclass(frozen=True)
class SimEvent:
    time: float
    device_stage: int
    kind: str
    microbatch_id: int  # -1 for dp_sync
    duration: float

    def to_dict(self) -> dict:
        return {
            "time": self.time,
            "device_stage": self.device_stage,
            "kind": self.kind,
            "microbatch_id": self.microbatch_id,
            "duration": self.duration,
        }


@dataclass(frozen=True)
class SimResult:
    makespan: float
    stage_peak_memory: tuple[int, ...]
    trace: tuple[SimEvent, ...]
    bubble_fraction: float


@dataclass
class _StageState:
    t_fwd: Fraction
    t_recompute: Fraction
    t_bwd: Fraction
    dp_sync: Fraction
    ops: list[tuple[str, int]] = field(default_factory=list)
    next_op: int = 0
    clock: Fraction = Fraction(0)
    in_flight: int = 0
    in_flight_peak: int = 0


def _one_f_one_b_order(pp: int, stage_index: int, n_microbatches: int) -> list[tuple[str, int]]:
    """Stage-local op order: warmup forwards, 1F1B steady state, cooldown."""
    warmup = min(n_microbatches, pp - stage_index)
    ops: list[tuple[str, int]] = [("fwd", k) for k in range(1, warmup + 1)]
    for j in range(1, n_microbatches - warmup + 1):
        ops.append(("bwd", j))
        ops.append(("fwd", warmup + j))
    for k in range(n_microbatches - warmup + 1, n_microbatches + 1):
        ops.append(("bwd", k))
    return ops


def _derive_stage_states(plan: Plan, model: ModelProfile, cluster: ClusterProfile,
                         training: TrainingConfig, transitions: bool) -> list[_StageState]:
    states: list[_StageState] = []
    devices_per_stage = cluster.n_devices // plan.pp
    stage_group = collectives.comm_group(cluster, devices_per_stage)
    for i, (a, b) in enumerate(plan.stage_ranges):
        t_fwd = Fraction(0)
        t_rec = Fraction(0)
        t_bwd = Fraction(0)
        for li in range(a, b):
            layer = model.layers[li]
            s = plan.layer_strategies[li]
            t = costmodel.layer_time(layer, s, plan.microbatch, model.seq_len,
                                     model.hidden_size, cluster, training)
            # tp traffic and stage-3 gathers split evenly between the passes
            t_fwd += Fraction(t.fwd_compute) + Fraction(t.tp_comm) / 2 \
                + Fraction(t.zero3_param_gather) / 2
            t_rec += Fraction(t.recompute_extra)
            t_bwd += Fraction(t.bwd_compute) + Fraction(t.tp_comm) / 2 \
                + Fraction(t.zero3_param_gather) / 2
            if transitions and li > a:
                boundary = plan.microbatch * model.seq_len * layer.boundary_bytes_per_token
                t_fwd += Fraction(costmodel.transition_time(
                    plan.layer_strategies[li - 1], s, boundary, stage_group, cluster))
        states.append(_StageState(
            t_fwd=t_fwd,
            t_recompute=t_rec,
            t_bwd=t_bwd,
            dp_sync=Fraction(plan.cost_breakdown[i].dp_sync_time),
            ops=_one_f_one_b_order(plan.pp, i, plan.n_microbatches),
        ))
    return states


def _stage_peak_bytes(plan: Plan, model: ModelProfile, training: TrainingConfig,
                      stage_index: int, observed_in_flight: int) -> int:
    """Stage peak through the cost model's own formula at the observed depth."""
    a, b = plan.stage_ranges[stage_index]
    total = 0
    for li in range(a, b):
        mem = costmodel.layer_memory(model.layers[li], plan.layer_strategies[li],
                                     plan.microbatch, model.seq_len,
                                     max(observed_in_flight, 1), training)
        total += mem.total_int()
    return total


def simulate(plan: Plan, model: ModelProfile, cluster: ClusterProfile,
             training: TrainingConfig, *, transitions: bool = True,
             overlap_p2p: bool = False) -> SimResult:
    """Execute the plan's 1F1B schedule in simulated time."""
    violations = validate_plan(plan, model, cluster, training, transitions=transitions)
    if violations:
        raise ValidationError("plan is not valid: " + "; ".join(violations))

    pp = plan.pp
    states = _derive_stage_states(plan, model, cluster, training, transitions)
    p2p_raw = stage_p2p_times(model, cluster, pp, plan.stage_ranges, plan.microbatch)
    boundary_time = [Fraction(t) for t in p2p_raw]  # transfer over boundary i <-> i+1

    events: list[tuple[Fraction, int, str, int, Fraction]] = []
    fwd_arrival: dict[tuple[int, int], Fraction] = {}
    bwd_arrival: dict[tuple[int, int], Fraction] = {}

    def emit(time: Fraction, stage: int, kind: str, mb: int, duration: Fraction) -> None:
        events.append((time, stage, kind, mb, duration))

    def send(stage: int, to_stage: int, mb: int, transfer: Fraction,
             arrivals: dict[tuple[int, int], Fraction]) -> None:
        st = states[stage]
        emit(st.clock, stage, "p2p_send", mb, transfer)
        if overlap_p2p:
            arrival = st.clock + transfer
        else:
            st.clock += transfer  # the transfer occupies the sending stage
            arrival = st.clock
        emit(arrival, to_stage, "p2p_recv", mb, Fraction(0))
        arrivals[(mb, to_stage)] = arrival

    def try_run(stage: int) -> bool:
        st = states[stage]
        if st.next_op >= len(st.ops):
            return False
        kind, mb = st.ops[st.next_op]
        if kind == "fwd":
            if stage > 0:
                arrival = fwd_arrival.get((mb, stage))
                if arrival is None:
                    return False
                start = max(st.clock, arrival)
            else:
                start = st.clock
            emit(start, stage, "fwd", mb, st.t_fwd)
            st.in_flight += 1
            st.in_flight_peak = max(st.in_flight_peak, st.in_flight)
            st.clock = start + st.t_fwd
            if stage < pp - 1:
                send(stage, stage + 1, mb, boundary_time[stage], fwd_arrival)
        else:
            if stage < pp - 1:
                arrival = bwd_arrival.get((mb, stage))
                if arrival is None:
                    return False
                start = max(st.clock, arrival)
            else:
                start = st.clock  # own forward already ran: stage order guarantees it
            if st.t_recompute:
                emit(start, stage, "recompute", mb, st.t_recompute)
                start += st.t_recompute
            emit(start, stage, "bwd", mb, st.t_bwd)
            st.clock = start + st.t_bwd
            st.in_flight -= 1
            if stage > 0:
                # the boundary tensor's gradient flows back over the same link
                send(stage, stage - 1, mb, boundary_time[stage - 1], bwd_arrival)
        st.next_op += 1
        if st.next_op == len(st.ops) and st.dp_sync:
            emit(st.clock, stage, "dp_sync", -1, st.dp_sync)
            st.clock += st.dp_sync
        return True

    remaining = sum(len(st.ops) for st in states)
    while remaining:
        progressed = False
        for stage in range(pp):
            while try_run(stage):
                remaining -= 1
                progressed = True
        if not progressed:
            raise SchedulingDeadlock("no stage can make progress; this is a simulator bug")

    for i, st in enumerate(states):
        if st.in_flight != 0:
            raise SchedulingDeadlock(f"stage {i} finished with {st.in_flight} microbatches live")

    makespan = Fraction(0)
    compute_total = Fraction(0)
    for time, _stage, kind, _mb, duration in events:
        makespan = max(makespan, time + duration)
        if kind in ("fwd", "bwd", "recompute"):
            compute_total += duration
    bubble = 1.0 - float(compute_total / (pp * makespan)) if makespan > 0 else 0.0

    events.sort(key=lambda e: (e[0], e[1], _KIND_ORDER[e[2]], e[3]))
    trace = tuple(SimEvent(time=float(e[0]), device_stage=e[1], kind=e[2],
                           microbatch_id=e[3], duration=float(e[4])) for e in events)
    peaks = tuple(_stage_peak_bytes(plan, model, training, i, states[i].in_flight_peak)
                  for i in range(pp))
    return SimResult(
        makespan=float(makespan),
        stage_peak_memory=peaks,
        trace=trace,
        bubble_fraction=bubble,
    )


def compare_with_analytic(plan: Plan, model: ModelProfile, cluster: ClusterProfile,
                          training: TrainingConfig, *, transitions: bool = True,
                          overlap_p2p: bool = False) -> dict:
    """Run the simulator and the closed-form estimate on identical inputs."""
    result = simulate(plan, model, cluster, training, transitions=transitions,
                      overlap_p2p=overlap_p2p)
    costs = []
    for i, (a, b) in enumerate(plan.stage_ranges):
        costs.append(costmodel.stage_cost(
            list(model.layers[a:b]), list(plan.layer_strategies[a:b]), i, plan.pp,
            plan.microbatch, plan.n_microbatches, model, cluster, training,
            transitions=transitions))
    p2p = stage_p2p_times(model, cluster, plan.pp, plan.stage_ranges, plan.microbatch)
    analytic = costmodel.iteration_time(costs, plan.pp, plan.n_microbatches, p2p)
    gap = (result.makespan - analytic) / analytic if analytic else 0.0
    return {
        "sim_makespan": result.makespan,
        "analytic_time": analytic,
        "relative_gap": gap,
        "sim_result": result,
    }


def trace_to_jsonl(result: SimResult) -> str:
    """One event per line, fields in a fixed order, for timeline viewers."""
    from .serialize import dumps_canonical

    lines = [dumps_canonical(e.to_dict(), sort_keys=False) for e in result.trace]
    return "".join(lines)
