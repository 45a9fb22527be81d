"""Search for the best per-layer hybrid-parallel plan.

The outer loops enumerate pipeline degree (powers of two) and microbatch
size (powers of two dividing the global batch).  For each combination,
every stage runs a memory-bucketed dynamic program over its layers that
picks one strategy per layer: candidate layer memory is rounded UP to a
bucket count, so emitted plans are always exactly feasible and optimality
loss is bounded by the bucket width.

Per-iteration data-parallel sync couples stages only through a max, so the
per-stage DP cannot see it directly.  The DP therefore minimizes
per-microbatch time plus an amortized share of the sync cost (exact for a
single stage, exact for identical stages, a close bound otherwise), several
amortization weights are tried, and every assembled assignment is re-scored
with the true iteration-time formula.  When stages are small enough to
enumerate outright, an exact cross-stage assembly replaces the heuristic
weights entirely.
"""

from __future__ import annotations

import itertools
import math
import time as _time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import collectives, costmodel
from .costmodel import StageCost
from .errors import (Infeasible, NoFeasiblePlan, OracleTooLarge, ValidationError)
from .profiles import ClusterProfile, LayerProfile, ModelProfile, TrainingConfig, is_power_of_two
from .strategy import ParallelStrategy, StrategyConstraints, enumerate_strategies

_EXACT_STAGE_CAP = 131072  # max enumerated options per stage for the exact assembly
_ORACLE_STAGE_CAP = 4_194_304  # the oracle must enumerate whole stages outright
_EXACT_CROSS_CAP = 4_194_304  # max entries in the cross-stage objective tensor


@dataclass(frozen=True)
class Plan:
    """A complete, costed parallelization plan."""

    pp: int
    microbatch: int
    n_microbatches: int
    stage_ranges: tuple[tuple[int, int], ...]
    layer_strategies: tuple[ParallelStrategy, ...]
    predicted_iteration_time: float
    predicted_stage_peak_memory: tuple[int, ...]
    cost_breakdown: tuple[StageCost, ...]

    def to_dict(self) -> dict:
        return {
            "version": 1,
            "pp": self.pp,
            "microbatch": self.microbatch,
            "n_microbatches": self.n_microbatches,
            "stage_ranges": [[a, b] for a, b in self.stage_ranges],
            "layer_strategies": [s.to_dict() for s in self.layer_strategies],
            "predicted_iteration_time": self.predicted_iteration_time,
            "predicted_stage_peak_memory": list(self.predicted_stage_peak_memory),
            "cost_breakdown": [c.to_dict() for c in self.cost_breakdown],
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "Plan":
        try:
            if obj.get("version") != 1:
                raise ValidationError(f"unsupported plan version {obj.get('version')!r}")
            return cls(
                pp=obj["pp"],
                microbatch=obj["microbatch"],
                n_microbatches=obj["n_microbatches"],
                stage_ranges=tuple((int(a), int(b)) for a, b in obj["stage_ranges"]),
                layer_strategies=tuple(ParallelStrategy.from_dict(s)
                                       for s in obj["layer_strategies"]),
                predicted_iteration_time=float(obj["predicted_iteration_time"]),
                predicted_stage_peak_memory=tuple(int(x)
                                                  for x in obj["predicted_stage_peak_memory"]),
                cost_breakdown=tuple(
                    StageCost(
                        per_microbatch_time=float(c["per_microbatch_time"]),
                        dp_sync_time=float(c["dp_sync_time"]),
                        peak_memory_bytes=int(c["peak_memory_bytes"]),
                        transition_time=float(c["transition_time"]),
                    )
                    for c in obj["cost_breakdown"]
                ),
            )
        except (KeyError, TypeError, IndexError) as exc:
            raise ValidationError(f"malformed plan object: {exc}") from exc

    def stage_of_layer(self, layer_index: int) -> int:
        for i, (a, b) in enumerate(self.stage_ranges):
            if a <= layer_index < b:
                return i
        raise ValidationError(f"layer {layer_index} not covered by stage_ranges")


@dataclass(frozen=True)
class SearchConfig:
    """Knobs for the plan search."""

    memory_buckets: int = 1024
    constraints: StrategyConstraints = field(default_factory=StrategyConstraints)
    transitions: bool = True
    max_pp: int | None = None
    time_limit_s: float | None = None
    jobs: int = 1

    def validate(self) -> None:
        if self.memory_buckets < 16:
            raise ValidationError("memory_buckets must be >= 16")
        if self.jobs < 1:
            raise ValidationError("jobs must be >= 1")
        self.constraints.validate()


@dataclass(frozen=True)
class SearchReport:
    """Result of a search plus how it got there.

    memory_binding is True when the memory budget changed the outcome: the
    same search with the budget lifted finds a strictly faster plan.
    completed is False when a time limit stopped the sweep early (the plan
    is then best-so-far).
    """

    plan: Plan
    memory_binding: bool
    completed: bool


def near_equal_split(n_layers: int, pp: int) -> tuple[tuple[int, int], ...]:
    """Contiguous stage ranges; the first n_layers % pp stages get one extra."""
    base, extra = divmod(n_layers, pp)
    ranges = []
    start = 0
    for i in range(pp):
        size = base + (1 if i < extra else 0)
        ranges.append((start, start + size))
        start += size
    return tuple(ranges)


def _powers_of_two_up_to(n: int) -> list[int]:
    out, v = [], 1
    while v <= n:
        out.append(v)
        v *= 2
    return out


def stage_p2p_times(model: ModelProfile, cluster: ClusterProfile, pp: int,
                    stage_ranges: tuple[tuple[int, int], ...], microbatch: int) -> list[float]:
    """Forward boundary-send time per stage (zero for the last stage).

    The transfer is the input tensor of the next stage's first layer for one
    full microbatch; it does not depend on the strategies chosen.
    """
    devices_per_stage = cluster.n_devices // pp
    out = []
    for i in range(pp):
        if i == pp - 1:
            out.append(0.0)
            continue
        first_next = stage_ranges[i + 1][0]
        volume = microbatch * model.seq_len * model.layers[first_next].boundary_bytes_per_token
        span = collectives.stage_boundary_span(cluster, devices_per_stage, i)
        out.append(collectives.p2p_time(volume, cluster, span))
    return out


# --- per-(pp, microbatch) cost tables ---------------------------------------


class _StageTables:
    """Per-layer, per-strategy cost arrays for one stage in one search context."""

    def __init__(self, layers: list[LayerProfile], strategies: list[ParallelStrategy],
                 stage_index: int, pp: int, microbatch: int, n_microbatches: int,
                 model: ModelProfile, cluster: ClusterProfile, training: TrainingConfig,
                 transitions: bool):
        n_layers = len(layers)
        n_strats = len(strategies)
        self.strategies = strategies
        self.time = np.zeros((n_layers, n_strats))
        self.dp_sync = np.zeros((n_layers, n_strats))
        self.mem = np.zeros((n_layers, n_strats), dtype=np.int64)
        in_flight = costmodel.in_flight_microbatches(pp, stage_index, n_microbatches)
        overlap_scale = 1.0 - training.comm_overlap_fraction
        for li, layer in enumerate(layers):
            for si, s in enumerate(strategies):
                t = costmodel.layer_time(layer, s, microbatch, model.seq_len,
                                         model.hidden_size, cluster, training)
                self.time[li, si] = t.per_microbatch_total()
                self.dp_sync[li, si] = overlap_scale * costmodel.layer_dp_sync_time(
                    layer, s, cluster, training)
                self.mem[li, si] = costmodel.layer_memory(
                    layer, s, microbatch, model.seq_len, in_flight, training).total_int()
        self.trans: list[np.ndarray] = []
        if transitions and n_layers > 1:
            devices_per_stage = strategies[0].tp * strategies[0].dp if strategies else 1
            stage_group = collectives.comm_group(cluster, devices_per_stage)
            for li in range(1, n_layers):
                boundary = microbatch * model.seq_len * layers[li].boundary_bytes_per_token
                table = np.zeros((n_strats, n_strats))
                for a, sa in enumerate(strategies):
                    for b, sb in enumerate(strategies):
                        table[a, b] = costmodel.transition_time(
                            sa, sb, boundary, stage_group, cluster)
                self.trans.append(table)
        elif n_layers > 1:
            self.trans = [np.zeros((n_strats, n_strats))] * (n_layers - 1)

    def buckets(self, budget_bytes: int, n_buckets: int) -> np.ndarray:
        """Conservative bucket counts: layer memory rounded UP to bucket width."""
        out = np.zeros(self.mem.shape, dtype=np.int64)
        for li in range(self.mem.shape[0]):
            for si in range(self.mem.shape[1]):
                m = int(self.mem[li, si])
                if m == 0:
                    out[li, si] = 0
                elif budget_bytes <= 0:
                    out[li, si] = n_buckets + 1  # unsatisfiable
                else:
                    out[li, si] = (m * n_buckets + budget_bytes - 1) // budget_bytes
        return out

    def min_achievable_bytes(self) -> int:
        return int(self.mem.min(axis=1).sum()) if self.mem.size else 0


# --- scalar DP over one stage ------------------------------------------------


def _solve_stage_dp(tables: _StageTables, buckets: np.ndarray, n_buckets: int,
                    transitions: bool, dp_sync_weight: float) -> list[int] | None:
    """Pick one strategy per layer minimizing time + weight * dp_sync.

    State is (layer, exact buckets used[, previous strategy]) so the final
    scan from low to high bucket totals implements the tie-break "lower
    memory, then enumeration order".  Returns chosen strategy indices, or
    None when no assignment fits the budget.
    """
    n_layers, n_strats = tables.time.shape
    if n_strats == 0:
        return None
    cost = tables.time + dp_sync_weight * tables.dp_sync
    B = n_buckets

    if not transitions or n_layers == 1:
        f = np.full(B + 1, np.inf)
        parents = np.full((n_layers, B + 1), -1, dtype=np.int32)
        for si in range(n_strats):
            b = int(buckets[0, si])
            if b <= B and cost[0, si] < f[b]:
                f[b] = cost[0, si]
                parents[0, b] = si
        for li in range(1, n_layers):
            f_new = np.full(B + 1, np.inf)
            par = parents[li]
            for si in range(n_strats):
                b = int(buckets[li, si])
                if b > B:
                    continue
                cand = f[:B + 1 - b] + cost[li, si]
                seg = f_new[b:]
                better = cand < seg
                seg[better] = cand[better]
                par[b:][better] = si
            f = f_new
        j = int(np.argmin(f))  # first minimum: lowest bucket total wins ties
        if not np.isfinite(f[j]):
            return None
        choice = []
        for li in range(n_layers - 1, -1, -1):
            si = int(parents[li, j])
            choice.append(si)
            j -= int(buckets[li, si])
        choice.reverse()
        return choice

    # Transition costs depend on the previous layer's strategy, so carry it.
    f = np.full((B + 1, n_strats), np.inf)
    for si in range(n_strats):
        b = int(buckets[0, si])
        if b <= B:
            f[b, si] = cost[0, si]
    prev_args = np.zeros((n_layers, B + 1, n_strats), dtype=np.int32)
    for li in range(1, n_layers):
        trans = tables.trans[li - 1]
        stacked = f[:, :, None] + trans[None, :, :]  # (j, s_prev, s)
        prev_best = stacked.min(axis=1)
        prev_args[li] = stacked.argmin(axis=1)
        f_new = np.full((B + 1, n_strats), np.inf)
        for si in range(n_strats):
            b = int(buckets[li, si])
            if b > B:
                continue
            f_new[b:, si] = prev_best[:B + 1 - b, si] + cost[li, si]
        f = f_new
    flat = int(np.argmin(f))  # scans j ascending then strategy enumeration order
    j, si = divmod(flat, n_strats)
    if not np.isfinite(f[j, si]):
        return None
    choice = [si]
    for li in range(n_layers - 1, 0, -1):
        j -= int(buckets[li, si])  # prev_args is indexed by the bucket total before li
        si = int(prev_args[li, j, si])
        choice.append(si)
    choice.reverse()
    return choice


def dp_optimize_stage(
    layers: list[LayerProfile],
    strategies: list[ParallelStrategy],
    budget_bytes: int,
    stage_index: int,
    pp: int,
    microbatch: int,
    n_microbatches: int,
    model: ModelProfile,
    cluster: ClusterProfile,
    training: TrainingConfig,
    cfg: SearchConfig,
) -> tuple[list[ParallelStrategy], float, int]:
    """Choose one strategy per layer of a stage under a memory budget.

    Minimizes cumulative per-microbatch time; ties break toward lower
    memory, then enumeration order.  Returns (choices, stage per-microbatch
    time, stage peak memory in bytes).  Raises Infeasible when every
    assignment exceeds the budget.
    """
    if budget_bytes <= 0:
        raise Infeasible("memory budget is not positive")
    if not strategies:
        raise Infeasible("strategy list is empty")
    cfg.validate()
    tables = _StageTables(layers, strategies, stage_index, pp, microbatch, n_microbatches,
                          model, cluster, training, cfg.transitions)
    buckets = tables.buckets(budget_bytes, cfg.memory_buckets)
    choice = _solve_stage_dp(tables, buckets, cfg.memory_buckets, cfg.transitions, 0.0)
    if choice is None:
        raise Infeasible(
            f"stage {stage_index}: minimum achievable memory "
            f"{tables.min_achievable_bytes()} B exceeds budget {budget_bytes} B")
    chosen = [strategies[si] for si in choice]
    cost = costmodel.stage_cost(layers, chosen, stage_index, pp, microbatch, n_microbatches,
                                model, cluster, training, transitions=cfg.transitions)
    return chosen, cost.per_microbatch_time, cost.peak_memory_bytes


# --- exact cross-stage assembly for small instances ---------------------------


def _enumerate_stage_options(tables: _StageTables, budget_bytes: int | None,
                             transitions: bool):
    """All exactly-feasible assignments of one stage as flat option arrays.

    Feasibility here is the plan contract itself (exact bytes within the
    budget), not the DP's bucket discretization, so the refinement can
    recover assignments the conservative rounding would exclude.  Returns
    (c, d, mem, index_tuples) in lexicographic assignment order, or None
    when the stage is too large to enumerate or nothing fits.
    """
    n_layers, n_strats = tables.time.shape
    if n_strats == 0 or n_strats ** n_layers > _EXACT_STAGE_CAP:
        return None
    c = tables.time[0].copy()
    d = tables.dp_sync[0].copy()
    mem = tables.mem[0].copy()
    for li in range(1, n_layers):
        c = c[..., None] + tables.time[li]
        if transitions:
            c = c + tables.trans[li - 1][tuple([None] * (li - 1))]
        d = d[..., None] + tables.dp_sync[li]
        mem = mem[..., None] + tables.mem[li]
    c, d, mem = c.ravel(), d.ravel(), mem.ravel()
    if budget_bytes is None:
        feasible = np.ones(mem.shape, dtype=bool)
    else:
        feasible = mem <= budget_bytes
    if not feasible.any():
        return None
    idx = np.nonzero(feasible)[0]
    shape = (n_strats,) * n_layers
    index_tuples = np.stack(np.unravel_index(idx, shape), axis=1)
    return c[idx], d[idx], mem[idx], index_tuples


def _exact_assignment(stage_options: list, p2p: list[float], n_microbatches: int):
    """Exact minimizer of the iteration-time objective over stage option sets.

    Builds the full cross product of per-stage options (max cycle, cycle sum,
    and max sync fold associatively), then evaluates the iteration-time
    closed form on every combination.  Returns per-stage option indices, or
    None when the cross product exceeds the cap.
    """
    m = n_microbatches
    total = 1
    for opts in stage_options:
        total *= len(opts[0])
        if total > _EXACT_CROSS_CAP:
            return None
    c0 = stage_options[0][0] + p2p[0]
    maxc, sumc = c0.copy(), c0.copy()
    maxd = stage_options[0][1].copy()
    summem = stage_options[0][2].astype(np.float64)
    path: list[np.ndarray] = [np.arange(len(c0))]
    for i in range(1, len(stage_options)):
        ci = stage_options[i][0] + p2p[i]
        di = stage_options[i][1]
        memi = stage_options[i][2].astype(np.float64)
        n_prev, n_i = len(maxc), len(ci)
        maxc = np.maximum.outer(maxc, ci).ravel()
        sumc = np.add.outer(sumc, ci).ravel()
        maxd = np.maximum.outer(maxd, di).ravel()
        summem = np.add.outer(summem, memi).ravel()
        path = [np.repeat(p, n_i) for p in path]
        path.append(np.tile(np.arange(n_i), n_prev))
    objective = (m - 1) * maxc + sumc + maxd
    best_t = objective.min()
    mask = objective == best_t
    mem_masked = np.where(mask, summem, np.inf)
    best_mem = mem_masked.min()
    flat = int(np.argmax(mem_masked == best_mem))  # first index: lexicographic order
    return [int(p[flat]) for p in path]


# --- full search ---------------------------------------------------------------


@dataclass
class _ComboOutcome:
    pp: int
    microbatch: int
    assignment: tuple[ParallelStrategy, ...] | None
    predicted_time: float = math.inf
    total_peak: int = 0
    # diagnostics for infeasible combos
    tight_stage: int | None = None
    min_achievable: int | None = None


def _amortization_weights(pp: int, n_microbatches: int) -> list[float]:
    m = n_microbatches
    if pp == 1:
        return [1.0 / m]  # iteration time = m * stage_time + dp_sync, exactly
    weights = [1.0 / (m + pp - 1), 1.0 / m, 0.0]
    out: list[float] = []
    for w in weights:
        if w not in out:
            out.append(w)
    return out


def _evaluate_combo(model: ModelProfile, cluster: ClusterProfile, training: TrainingConfig,
                    cfg: SearchConfig, pp: int, microbatch: int,
                    unbounded_memory: bool) -> _ComboOutcome:
    outcome = _ComboOutcome(pp=pp, microbatch=microbatch, assignment=None)
    devices_per_stage = cluster.n_devices // pp
    strategies = [s for s in enumerate_strategies(devices_per_stage, cluster, cfg.constraints)
                  if microbatch % s.dp == 0]
    if not strategies:
        return outcome
    m = training.global_batch // microbatch
    ranges = near_equal_split(model.n_layers, pp)
    budget = cluster.memory_budget_bytes()
    B = cfg.memory_buckets

    stage_tables: list[_StageTables] = []
    stage_buckets: list[np.ndarray] = []
    for i, (a, b) in enumerate(ranges):
        tables = _StageTables(list(model.layers[a:b]), strategies, i, pp, microbatch, m,
                              model, cluster, training, cfg.transitions)
        if unbounded_memory:
            buckets = np.zeros_like(tables.mem)
        else:
            buckets = tables.buckets(budget, B)
        stage_tables.append(tables)
        stage_buckets.append(buckets)

    candidates: list[list[list[int]]] = []

    # Exact small-stage refinement: enumerates stages outright under the
    # exact byte budget, so knife-edge assignments the bucket rounding
    # excludes are still reachable.
    exact_budget = None if unbounded_memory else budget
    options = [_enumerate_stage_options(stage_tables[i], exact_budget, cfg.transitions)
               for i in range(pp)]
    if all(opt is not None for opt in options):
        p2p = stage_p2p_times(model, cluster, pp, ranges, microbatch)
        exact = _exact_assignment([(o[0], o[1], o[2]) for o in options], p2p, m)
        if exact is not None:
            candidates.append([list(options[i][3][exact[i]]) for i in range(pp)])

    # Bucketed DP under the amortization-weight portfolio.
    per_weight_solutions: list[list[list[int]]] = []
    dp_tight_stage: int | None = None
    for w in _amortization_weights(pp, m):
        stages: list[list[int]] = []
        for i in range(pp):
            choice = _solve_stage_dp(stage_tables[i], stage_buckets[i], B, cfg.transitions, w)
            if choice is None:
                dp_tight_stage = i
                break
            stages.append(choice)
        if dp_tight_stage is not None:
            break  # bucket feasibility does not depend on the weight
        per_weight_solutions.append(stages)

    if per_weight_solutions:
        if pp <= 5 and len(per_weight_solutions) > 1:
            for combo in itertools.product(range(len(per_weight_solutions)), repeat=pp):
                candidates.append([per_weight_solutions[combo[i]][i] for i in range(pp)])
        else:
            candidates.extend(per_weight_solutions)

    if not candidates:
        if dp_tight_stage is not None:
            outcome.tight_stage = dp_tight_stage
            outcome.min_achievable = stage_tables[dp_tight_stage].min_achievable_bytes()
        return outcome

    # dedupe, preserving order (exact refinement candidate first)
    seen: set[tuple] = set()
    unique: list[list[list[int]]] = []
    for cand in candidates:
        key = tuple(tuple(stage) for stage in cand)
        if key not in seen:
            seen.add(key)
            unique.append(cand)

    p2p = stage_p2p_times(model, cluster, pp, ranges, microbatch)
    best: tuple[float, int] | None = None
    for cand in unique:
        assignment: list[ParallelStrategy] = []
        costs: list[StageCost] = []
        for i, (a, b) in enumerate(ranges):
            chosen = [strategies[si] for si in cand[i]]
            assignment.extend(chosen)
            costs.append(costmodel.stage_cost(
                list(model.layers[a:b]), chosen, i, pp, microbatch, m,
                model, cluster, training, transitions=cfg.transitions))
        t = costmodel.iteration_time(costs, pp, m, p2p)
        peak = sum(c.peak_memory_bytes for c in costs)
        if best is None or t < best[0] or (t == best[0] and peak < best[1]):
            best = (t, peak)
            outcome.assignment = tuple(assignment)
            outcome.predicted_time = t
            outcome.total_peak = peak
    return outcome


def _build_plan(model: ModelProfile, cluster: ClusterProfile, training: TrainingConfig,
                cfg: SearchConfig, outcome: _ComboOutcome) -> Plan:
    pp, microbatch = outcome.pp, outcome.microbatch
    m = training.global_batch // microbatch
    ranges = near_equal_split(model.n_layers, pp)
    costs: list[StageCost] = []
    for i, (a, b) in enumerate(ranges):
        costs.append(costmodel.stage_cost(
            list(model.layers[a:b]), list(outcome.assignment[a:b]), i, pp, microbatch, m,
            model, cluster, training, transitions=cfg.transitions))
    p2p = stage_p2p_times(model, cluster, pp, ranges, microbatch)
    t = costmodel.iteration_time(costs, pp, m, p2p)
    return Plan(
        pp=pp,
        microbatch=microbatch,
        n_microbatches=m,
        stage_ranges=ranges,
        layer_strategies=tuple(outcome.assignment),
        predicted_iteration_time=t,
        predicted_stage_peak_memory=tuple(c.peak_memory_bytes for c in costs),
        cost_breakdown=tuple(costs),
    )


def _search(model: ModelProfile, cluster: ClusterProfile, training: TrainingConfig,
            cfg: SearchConfig, unbounded_memory: bool) -> tuple[Plan, bool]:
    model.validate()
    cluster.validate()
    training.validate()
    cfg.validate()

    pp_limit = min(cluster.n_devices, model.n_layers)
    if cfg.max_pp is not None:
        pp_limit = min(pp_limit, cfg.max_pp)
    combos = [(pp, mb)
              for pp in _powers_of_two_up_to(pp_limit)
              for mb in reversed(_powers_of_two_up_to(training.global_batch))]

    started = _time.monotonic()
    completed = True
    outcomes: list[_ComboOutcome] = []

    def run(combo: tuple[int, int]) -> _ComboOutcome:
        return _evaluate_combo(model, cluster, training, cfg, combo[0], combo[1],
                               unbounded_memory)

    if cfg.jobs > 1:
        with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
            futures = [pool.submit(run, combo) for combo in combos]
            # collect in submission order so the reduction is independent of
            # completion order
            outcomes = [f.result() for f in futures]
    else:
        for combo in combos:
            if cfg.time_limit_s is not None and outcomes and \
                    _time.monotonic() - started > cfg.time_limit_s:
                completed = False
                break
            outcomes.append(run(combo))

    best: _ComboOutcome | None = None
    diag: _ComboOutcome | None = None
    for outcome in outcomes:
        if outcome.assignment is None:
            if outcome.min_achievable is not None and (
                    diag is None or outcome.min_achievable < diag.min_achievable):
                diag = outcome
            continue
        if best is None or outcome.predicted_time < best.predicted_time:
            best = outcome  # loop order encodes the (smaller pp, larger mb) tie-break
    if best is None:
        if diag is not None:
            budget = cluster.memory_budget_bytes()
            raise NoFeasiblePlan(
                f"no feasible plan: tightest stage is stage {diag.tight_stage} at "
                f"pp={diag.pp}, microbatch={diag.microbatch}, needing at least "
                f"{diag.min_achievable} B against a budget of {budget} B",
                stage_index=diag.tight_stage,
                min_achievable_bytes=diag.min_achievable,
                budget_bytes=budget,
            )
        raise NoFeasiblePlan("no feasible plan: no strategy survives the constraints")
    return _build_plan(model, cluster, training, cfg, best), completed


def make_plan(model: ModelProfile, cluster: ClusterProfile, training: TrainingConfig,
              pp: int, microbatch: int, layer_strategies: list[ParallelStrategy],
              *, transitions: bool = True) -> Plan:
    """Cost an explicit per-layer assignment into a full plan.

    Stage ranges follow the search's near-equal split.  The returned plan
    carries freshly computed costs, so validate_plan accepts it iff the
    assignment itself is legal and fits the memory budget.
    """
    if training.global_batch % microbatch != 0:
        raise ValidationError("microbatch must divide global_batch")
    if len(layer_strategies) != model.n_layers:
        raise ValidationError("need one strategy per layer")
    outcome = _ComboOutcome(pp=pp, microbatch=microbatch,
                            assignment=tuple(layer_strategies))
    cfg = SearchConfig(transitions=transitions)
    return _build_plan(model, cluster, training, cfg, outcome)


def optimize(model: ModelProfile, cluster: ClusterProfile, training: TrainingConfig,
             cfg: SearchConfig = SearchConfig()) -> Plan:
    """Return the plan with minimal predicted iteration time."""
    plan, _ = _search(model, cluster, training, cfg, unbounded_memory=False)
    return plan


def optimize_with_report(model: ModelProfile, cluster: ClusterProfile,
                         training: TrainingConfig,
                         cfg: SearchConfig = SearchConfig()) -> SearchReport:
    """Like optimize, but also reports whether the memory budget was binding."""
    plan, completed = _search(model, cluster, training, cfg, unbounded_memory=False)
    unbounded, _ = _search(model, cluster, training, cfg, unbounded_memory=True)
    binding = unbounded.predicted_iteration_time != plan.predicted_iteration_time
    return SearchReport(plan=plan, memory_binding=binding, completed=completed)


# --- brute-force oracle ---------------------------------------------------------


@dataclass(frozen=True)
class OracleLimits:
    max_layers: int = 4
    max_devices: int = 8


def brute_force_optimize(model: ModelProfile, cluster: ClusterProfile,
                         training: TrainingConfig, cfg: SearchConfig = SearchConfig(),
                         limits: OracleLimits = OracleLimits()) -> Plan:
    """Exhaustive reference search over every (pp, microbatch, assignment).

    Memory feasibility uses exact byte counts (no bucketing).  Only usable
    on tiny instances; raises OracleTooLarge beyond the guard rails.
    """
    model.validate()
    cluster.validate()
    training.validate()
    cfg.validate()
    if model.n_layers > limits.max_layers or cluster.n_devices > limits.max_devices:
        raise OracleTooLarge(
            f"oracle limited to {limits.max_layers} layers / {limits.max_devices} devices")

    budget = cluster.memory_budget_bytes()
    pp_limit = min(cluster.n_devices, model.n_layers)
    if cfg.max_pp is not None:
        pp_limit = min(pp_limit, cfg.max_pp)

    best: tuple[float, _ComboOutcome] | None = None
    for pp in _powers_of_two_up_to(pp_limit):
        devices_per_stage = cluster.n_devices // pp
        all_strategies = enumerate_strategies(devices_per_stage, cluster, cfg.constraints)
        ranges = near_equal_split(model.n_layers, pp)
        for microbatch in reversed(_powers_of_two_up_to(training.global_batch)):
            strategies = [s for s in all_strategies if microbatch % s.dp == 0]
            if not strategies:
                continue
            m = training.global_batch // microbatch
            stage_opts = []
            feasible = True
            for i, (a, b) in enumerate(ranges):
                tables = _StageTables(list(model.layers[a:b]), strategies, i, pp,
                                      microbatch, m, model, cluster, training,
                                      cfg.transitions)
                opts = _oracle_stage_options(tables, budget, cfg.transitions)
                if opts is None:
                    feasible = False
                    break
                stage_opts.append(opts)
            if not feasible:
                continue
            p2p = stage_p2p_times(model, cluster, pp, ranges, microbatch)
            pick = _oracle_pick(stage_opts, p2p, m)
            assignment: list[ParallelStrategy] = []
            for i in range(pp):
                assignment.extend(strategies[si] for si in stage_opts[i][3][pick[i]])
            outcome = _ComboOutcome(pp=pp, microbatch=microbatch,
                                    assignment=tuple(assignment))
            plan_costs = []
            for i, (a, b) in enumerate(ranges):
                plan_costs.append(costmodel.stage_cost(
                    list(model.layers[a:b]), list(assignment[a:b]), i, pp, microbatch, m,
                    model, cluster, training, transitions=cfg.transitions))
            t = costmodel.iteration_time(plan_costs, pp, m, p2p)
            # across combos only a strictly better time wins, so loop order
            # encodes the (smaller pp, larger microbatch) tie-break
            if best is None or t < best[0]:
                outcome.predicted_time = t
                best = (t, outcome)
    if best is None:
        raise NoFeasiblePlan("no feasible plan within oracle guard rails")
    return _build_plan(model, cluster, training, cfg, best[1])


def _oracle_pick(stage_opts: list, p2p: list[float], n_microbatches: int) -> list[int]:
    """Directly evaluate the iteration-time formula over every combination.

    Walks all but the last stage with explicit nested recursion and
    vectorizes only the innermost stage; deliberately plain so it stays an
    independent check on the production assembly.
    """
    pp = len(stage_opts)
    m = n_microbatches
    last_c = stage_opts[-1][0] + p2p[-1]
    last_d = stage_opts[-1][1]
    last_mem = stage_opts[-1][2].astype(np.float64)
    best: tuple[float, float, tuple[int, ...], int] | None = None

    def recurse(i: int, maxc: float, sumc: float, maxd: float, summem: float,
                prefix: tuple[int, ...]) -> None:
        nonlocal best
        if i == pp - 1:
            times = (m - 1) * np.maximum(maxc, last_c) + (sumc + last_c) \
                + np.maximum(maxd, last_d)
            mems = summem + last_mem
            t_min = times.min()
            masked = np.where(times == t_min, mems, np.inf)
            mem_min = masked.min()
            j = int(np.argmax(masked == mem_min))
            if best is None or t_min < best[0] or (t_min == best[0] and mem_min < best[1]):
                best = (float(t_min), float(mem_min), prefix, j)
            return
        c_i = stage_opts[i][0] + p2p[i]
        d_i = stage_opts[i][1]
        mem_i = stage_opts[i][2]
        for j in range(len(c_i)):
            recurse(i + 1, max(maxc, float(c_i[j])), sumc + float(c_i[j]),
                    max(maxd, float(d_i[j])), summem + float(mem_i[j]), prefix + (j,))

    recurse(0, float("-inf"), 0.0, float("-inf"), 0.0, ())
    assert best is not None
    return list(best[2]) + [best[3]]


def _oracle_stage_options(tables: _StageTables, budget: int, transitions: bool):
    """Every assignment of one stage with exact (unbucketed) memory filtering."""
    n_layers, n_strats = tables.time.shape
    if n_strats == 0 or n_strats ** n_layers > _ORACLE_STAGE_CAP:
        raise OracleTooLarge("stage assignment space too large to enumerate")
    c = tables.time[0].copy()
    d = tables.dp_sync[0].copy()
    mem = tables.mem[0].copy()
    for li in range(1, n_layers):
        c = c[..., None] + tables.time[li]
        if transitions:
            c = c + tables.trans[li - 1][tuple([None] * (li - 1))]
        d = d[..., None] + tables.dp_sync[li]
        mem = mem[..., None] + tables.mem[li]
    c, d, mem = c.ravel(), d.ravel(), mem.ravel()
    feasible = mem <= budget
    if not feasible.any():
        return None
    idx = np.nonzero(feasible)[0]
    shape = (n_strats,) * n_layers
    index_tuples = np.stack(np.unravel_index(idx, shape), axis=1)
    return c[idx], d[idx], mem[idx], index_tuples


# --- plan validation --------------------------------------------------------------


def validate_plan(plan: Plan, model: ModelProfile, cluster: ClusterProfile,
                  training: TrainingConfig, *, transitions: bool = True) -> list[str]:
    """Re-derive every plan invariant and re-cost the plan.

    Returns a list of human-readable violations; an empty list means the
    plan is internally consistent and feasible.
    """
    violations: list[str] = []

    if plan.pp < 1 or len(plan.stage_ranges) != plan.pp:
        violations.append(f"pp = {plan.pp} does not match {len(plan.stage_ranges)} stage ranges")
        return violations
    expected_start = 0
    partition_ok = True
    for a, b in plan.stage_ranges:
        if a != expected_start or b <= a:
            partition_ok = False
        expected_start = b
    if not partition_ok or expected_start != model.n_layers:
        violations.append("stage_ranges not a partition of [0, n_layers)")
        return violations

    if len(plan.layer_strategies) != model.n_layers:
        violations.append("layer_strategies length does not equal n_layers")
        return violations

    if cluster.n_devices % plan.pp != 0:
        violations.append(f"pp = {plan.pp} does not divide n_devices = {cluster.n_devices}")
        return violations
    devices_per_stage = cluster.n_devices // plan.pp
    if not is_power_of_two(devices_per_stage):
        violations.append(f"devices per stage {devices_per_stage} is not a power of two")

    if plan.microbatch * plan.n_microbatches != training.global_batch:
        violations.append(
            f"microbatch * n_microbatches = {plan.microbatch * plan.n_microbatches} "
            f"does not equal global_batch = {training.global_batch}")

    for i, s in enumerate(plan.layer_strategies):
        try:
            s.validate(devices_per_stage)
        except ValidationError as exc:
            violations.append(f"layer {i} strategy invalid: {exc}")
        if plan.microbatch % s.dp != 0:
            violations.append(f"layer {i}: microbatch {plan.microbatch} not divisible by dp {s.dp}")
    if violations:
        return violations

    try:
        costs = []
        for i, (a, b) in enumerate(plan.stage_ranges):
            costs.append(costmodel.stage_cost(
                list(model.layers[a:b]), list(plan.layer_strategies[a:b]), i, plan.pp,
                plan.microbatch, plan.n_microbatches, model, cluster, training,
                transitions=transitions))
        p2p = stage_p2p_times(model, cluster, plan.pp, plan.stage_ranges, plan.microbatch)
        recost = costmodel.iteration_time(costs, plan.pp, plan.n_microbatches, p2p)
    except Exception as exc:  # noqa: BLE001 - any cost failure is a violation
        violations.append(f"plan cannot be re-costed: {exc}")
        return violations

    budget = cluster.memory_budget_bytes()
    if len(plan.predicted_stage_peak_memory) != plan.pp:
        violations.append("predicted_stage_peak_memory length does not equal pp")
    else:
        for i, (recorded, cost) in enumerate(zip(plan.predicted_stage_peak_memory, costs)):
            if recorded != cost.peak_memory_bytes:
                violations.append(
                    f"stage {i} stale peak memory: recorded {recorded}, "
                    f"re-cost {cost.peak_memory_bytes}")
            if recorded > budget:
                violations.append(
                    f"stage {i} peak memory {recorded} B exceeds budget {budget} B")

    denom = max(abs(recost), abs(plan.predicted_iteration_time), 1e-300)
    if abs(recost - plan.predicted_iteration_time) / denom > 1e-9:
        violations.append(
            f"stale cost: recorded predicted_iteration_time {plan.predicted_iteration_time!r} "
            f"differs from re-cost {recost!r}")

    if len(plan.cost_breakdown) != plan.pp:
        violations.append("cost_breakdown length does not equal pp")
    else:
        for i, (recorded, cost) in enumerate(zip(plan.cost_breakdown, costs)):
            for name in ("per_microbatch_time", "dp_sync_time", "transition_time"):
                a, b = getattr(recorded, name), getattr(cost, name)
                if abs(a - b) > 1e-9 * max(abs(a), abs(b), 1e-300):
                    violations.append(f"stage {i} stale {name}: recorded {a!r}, re-cost {b!r}")
            if recorded.peak_memory_bytes != cost.peak_memory_bytes:
                violations.append(f"stage {i} stale breakdown peak memory")
    return violations
