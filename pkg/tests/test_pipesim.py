import random
from fractions import Fraction

import pytest

from helpers import make_cluster, random_instance
from hybridplan.errors import ValidationError
from hybridplan.pipesim import compare_with_analytic, simulate, trace_to_jsonl
from hybridplan.profiles import LayerProfile, ModelProfile, TrainingConfig
from hybridplan.search import SearchConfig, make_plan, optimize, validate_plan
from hybridplan.strategy import ParallelStrategy, enumerate_strategies

SERIAL = ParallelStrategy(1, 1, 0, False, False)


def balanced_setup(pp, n_microbatches, *, layers_per_stage=1, fwd_seconds=1.0):
    """One layer per stage slot, dyadic compute times, zero communication."""
    # flops chosen so fwd = fwd_seconds exactly: tokens * fpt / flops
    seq_len = 8
    microbatch = 1
    flops_rate = 2.0 ** 20
    fpt = fwd_seconds * flops_rate / (microbatch * seq_len)
    layer = LayerProfile(
        param_count=1024.0, flops_per_token=fpt, flops_per_token_sq=0.0,
        act_shardable_bytes_per_token=64.0, act_replicated_bytes_per_token=0.0,
        boundary_bytes_per_token=0.0)  # zero-volume stage boundaries
    n_layers = pp * layers_per_stage
    model = ModelProfile(n_layers, 8, seq_len, (layer,) * n_layers)
    cluster = make_cluster(pp, pp, device_flops=flops_rate,
                           intra_lat=0.0, inter_lat=0.0)
    training = TrainingConfig(global_batch=n_microbatches * microbatch)
    plan = make_plan(model, cluster, training, pp, microbatch, [SERIAL] * n_layers)
    return plan, model, cluster, training


def test_serial_pipeline_runs_each_microbatch_back_to_back():
    plan, model, cluster, training = balanced_setup(1, 5)
    result = simulate(plan, model, cluster, training)
    t_stage = plan.cost_breakdown[0].per_microbatch_time
    assert result.makespan == 5 * t_stage
    assert result.bubble_fraction == 0.0


def test_two_stage_hand_trace():
    # fwd 1s, bwd 2s per stage; four microbatches: (4 + 2 - 1) * 3 = 15
    plan, model, cluster, training = balanced_setup(2, 4)
    result = simulate(plan, model, cluster, training)
    assert result.makespan == 15.0
    assert result.makespan == plan.predicted_iteration_time


def test_two_stage_single_microbatch_hand_trace():
    # f0, f1, b1, b0 strictly serialized: 2 * (1 + 2) = 6
    plan, model, cluster, training = balanced_setup(2, 1)
    result = simulate(plan, model, cluster, training)
    assert result.makespan == 6.0
    kinds = [(e.device_stage, e.kind) for e in result.trace if e.kind in ("fwd", "bwd")]
    assert kinds == [(0, "fwd"), (1, "fwd"), (1, "bwd"), (0, "bwd")]


@pytest.mark.parametrize("pp", [1, 2, 4])
@pytest.mark.parametrize("m", [1, 2, 4, 8])
def test_balanced_zero_comm_closed_form_exact(pp, m):
    plan, model, cluster, training = balanced_setup(pp, m)
    result = simulate(plan, model, cluster, training)
    t_stage = Fraction(plan.cost_breakdown[0].per_microbatch_time)
    expected = (m + pp - 1) * t_stage
    assert Fraction(result.makespan) == expected
    assert result.makespan == plan.predicted_iteration_time


def test_counting_and_causality_on_random_plans():
    rng = random.Random(1234)
    checked = 0
    while checked < 15:
        cluster, model, training = random_instance(rng)
        pps = [p for p in (2, 4) if p <= min(cluster.n_devices, model.n_layers)]
        if not pps:
            continue
        pp = rng.choice(pps)
        mb = rng.choice([m for m in (1, 2) if m <= training.global_batch])
        strategies = [s for s in enumerate_strategies(cluster.n_devices // pp, cluster)
                      if mb % s.dp == 0]
        if not strategies:
            continue
        plan = make_plan(model, cluster, training, pp, mb,
                         [rng.choice(strategies) for _ in range(model.n_layers)])
        if validate_plan(plan, model, cluster, training):
            continue
        checked += 1
        result = simulate(plan, model, cluster, training)
        m = plan.n_microbatches
        sends = {}
        for event in result.trace:
            if event.kind == "p2p_send":
                sends[(event.device_stage, event.microbatch_id,
                       len([1 for k in sends if k[:2] == (event.device_stage, event.microbatch_id)]))] = \
                    event.time + event.duration
        for stage in range(pp):
            fwd = [e for e in result.trace if e.device_stage == stage and e.kind == "fwd"]
            bwd = [e for e in result.trace if e.device_stage == stage and e.kind == "bwd"]
            assert len(fwd) == m and len(bwd) == m
            spans = sorted((e.time, e.time + e.duration) for e in result.trace
                           if e.device_stage == stage and e.kind != "p2p_recv")
            for (s1, e1), (s2, _e2) in zip(spans, spans[1:]):
                # trace times are float projections of exact rationals, so
                # re-adding durations here may overshoot by an ulp
                assert s2 >= e1 - 1e-12 * max(1.0, abs(e1))
        for event in result.trace:
            if event.kind == "p2p_recv":
                # a matching send must finish by the arrival time (same ulp
                # slack as above for the re-added end times)
                slack = 1e-12 * max(1.0, abs(event.time))
                senders = [e for e in result.trace if e.kind == "p2p_send"
                           and e.microbatch_id == event.microbatch_id
                           and abs(e.device_stage - event.device_stage) == 1
                           and e.time + e.duration <= event.time + slack]
                assert senders


def test_simulated_memory_within_analytic_and_budget():
    rng = random.Random(4321)
    checked = 0
    while checked < 15:
        cluster, model, training = random_instance(rng)
        try:
            plan = optimize(model, cluster, training, SearchConfig())
        except Exception:
            continue
        checked += 1
        result = simulate(plan, model, cluster, training)
        budget = cluster.memory_budget_bytes()
        for i in range(plan.pp):
            assert result.stage_peak_memory[i] <= plan.predicted_stage_peak_memory[i]
            assert result.stage_peak_memory[i] <= budget


def test_warmup_depth_matches_analytic_at_full_occupancy():
    plan, model, cluster, training = balanced_setup(4, 8)
    result = simulate(plan, model, cluster, training)
    # with m >= pp every stage reaches its full warmup depth
    assert result.stage_peak_memory == plan.predicted_stage_peak_memory


def test_compare_with_analytic_balanced_gap_zero():
    plan, model, cluster, training = balanced_setup(2, 4)
    cmp = compare_with_analytic(plan, model, cluster, training)
    assert cmp["relative_gap"] == 0.0


def test_unbalanced_sim_bounded_by_bottleneck():
    # stage 0 gets two layers, stage 1 one layer: stage 0 is the bottleneck
    plan, model, cluster, training = balanced_setup(2, 4, layers_per_stage=1)
    layers = (model.layers[0], model.layers[0], model.layers[0])
    model3 = ModelProfile(3, model.hidden_size, model.seq_len, layers)
    plan3 = make_plan(model3, cluster, training, 2, plan.microbatch, [SERIAL] * 3)
    cmp = compare_with_analytic(plan3, model3, cluster, training)
    bottleneck = max(c.per_microbatch_time for c in plan3.cost_breakdown)
    assert cmp["sim_makespan"] >= (plan3.n_microbatches - 1) * bottleneck
    assert cmp["sim_makespan"] <= cmp["analytic_time"]


def test_overlap_p2p_never_slower():
    rng = random.Random(99)
    checked = 0
    while checked < 8:
        cluster, model, training = random_instance(rng)
        pps = [p for p in (2, 4) if p <= min(cluster.n_devices, model.n_layers)]
        if not pps:
            continue
        pp = rng.choice(pps)
        strategies = [s for s in enumerate_strategies(cluster.n_devices // pp, cluster)
                      if 1 % s.dp == 0]
        if not strategies:
            continue
        plan = make_plan(model, cluster, training, pp, 1,
                         [rng.choice(strategies) for _ in range(model.n_layers)])
        if validate_plan(plan, model, cluster, training):
            continue
        checked += 1
        serialized = simulate(plan, model, cluster, training)
        overlapped = simulate(plan, model, cluster, training, overlap_p2p=True)
        assert overlapped.makespan <= serialized.makespan


def test_bubble_fraction_range_and_growth():
    plan1, model1, cluster1, training1 = balanced_setup(1, 4)
    assert simulate(plan1, model1, cluster1, training1).bubble_fraction == 0.0
    plan4, model4, cluster4, training4 = balanced_setup(4, 2)
    bubble = simulate(plan4, model4, cluster4, training4).bubble_fraction
    assert 0.0 < bubble < 1.0


def test_trace_deterministic_and_ordered():
    plan, model, cluster, training = balanced_setup(2, 3)
    a = simulate(plan, model, cluster, training)
    b = simulate(plan, model, cluster, training)
    assert a.trace == b.trace
    times = [(e.time, e.device_stage) for e in a.trace]
    assert times == sorted(times)
    jsonl = trace_to_jsonl(a)
    assert len(jsonl.splitlines()) == len(a.trace)
    first = jsonl.splitlines()[0]
    assert first.index('"time"') < first.index('"device_stage"') < first.index('"kind"')


def test_simulate_rejects_invalid_plan():
    plan, model, cluster, training = balanced_setup(2, 2)
    from hybridplan.search import Plan
    broken = Plan(**{**plan.__dict__,
                     "predicted_iteration_time": plan.predicted_iteration_time * 2})
    with pytest.raises(ValidationError):
        simulate(broken, model, cluster, training)
