"""Command-line workflow: synth-profile -> search -> simulate -> report -> validate.

Every subcommand is a pure function of its input files and flags; identical
inputs produce byte-identical outputs.  Exit codes: 0 ok, 2 usage error,
3 I/O or input failure, 4 no feasible plan, 5 invalid plan.
"""

from __future__ import annotations

import argparse
import sys

from . import collectives, costmodel, pipesim, profiles, search
from .errors import NoFeasiblePlan, ParseError, PlannerError, ValidationError
from .profiles import (BandwidthEntry, ClusterProfile, INTER_NODE, INTRA_NODE,
                       TrainingConfig)
from .search import Plan, SearchConfig
from .serialize import dumps_canonical, format_float
from .strategy import StrategyConstraints

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_INFEASIBLE = 4
EXIT_INVALID_PLAN = 5


class _UsageError(Exception):
    pass


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hybridplan",
        description="Plan and validate per-layer hybrid parallelism for Transformer training.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth-profile", help="write synthetic profile files")
    synth.add_argument("--model", action="store_true", help="emit a model profile")
    synth.add_argument("--cluster", action="store_true", help="emit a cluster profile")
    synth.add_argument("--training", action="store_true", help="emit a training config")
    synth.add_argument("--layers", type=int, help="model: number of layers")
    synth.add_argument("--hidden", type=int, help="model: hidden size")
    synth.add_argument("--seq", type=int, help="model: sequence length")
    synth.add_argument("--devices", type=int, help="cluster: device count")
    synth.add_argument("--devices-per-node", type=int, help="cluster: devices per node")
    synth.add_argument("--device-flops", type=float, default=100e12,
                       help="cluster: sustained FLOP/s per device")
    synth.add_argument("--device-memory", type=int, default=32 * 1024 ** 3,
                       help="cluster: usable bytes per device")
    synth.add_argument("--memory-reserve", type=float, default=0.05,
                       help="cluster: fraction withheld from planning")
    synth.add_argument("--intra-bandwidth", type=float, default=300e9,
                       help="cluster: intra-node bus bandwidth, bytes/s")
    synth.add_argument("--inter-bandwidth", type=float, default=25e9,
                       help="cluster: inter-node bus bandwidth, bytes/s")
    synth.add_argument("--intra-latency", type=float, default=1e-6)
    synth.add_argument("--inter-latency", type=float, default=5e-6)
    synth.add_argument("--global-batch", type=int, help="training: samples per iteration")
    synth.add_argument("-o", "--output", required=True)

    def add_common(p: argparse.ArgumentParser, *, plan: bool) -> None:
        p.add_argument("--cluster", required=True, help="cluster profile path")
        p.add_argument("--model", required=True, help="model profile path")
        p.add_argument("--training", required=True, help="training config path")
        p.add_argument("--lenient", action="store_true",
                       help="ignore unknown keys in profile files")
        p.add_argument("--transitions", choices=("on", "off"), default="on",
                       help="charge layout-change costs between adjacent layers")
        if plan:
            p.add_argument("--plan", required=True, help="plan file path")

    cmd = sub.add_parser("search", help="find the fastest feasible plan")
    add_common(cmd, plan=False)
    cmd.add_argument("-o", "--output", required=True, help="plan output path")
    cmd.add_argument("--memory-buckets", type=int, default=1024)
    cmd.add_argument("--max-pp", type=int, default=None)
    cmd.add_argument("--time-limit", type=float, default=None)
    cmd.add_argument("--jobs", type=int, default=1)
    cmd.add_argument("--allow-internode-tp", action="store_true")

    cmd = sub.add_parser("simulate", help="execute a plan in simulated time")
    add_common(cmd, plan=True)
    cmd.add_argument("-o", "--output", required=True, help="simulation result path")
    cmd.add_argument("--trace", default=None, help="optional JSON-lines event trace path")
    cmd.add_argument("--overlap-p2p", action="store_true",
                     help="let boundary transfers overlap compute")

    cmd = sub.add_parser("report", help="emit machine-readable cost breakdowns")
    add_common(cmd, plan=True)
    cmd.add_argument("-o", "--output", required=True,
                     help="output basename; writes <base>.json and <base>.csv")
    cmd.add_argument("--overlap-p2p", action="store_true")

    cmd = sub.add_parser("validate", help="check a plan against its profiles")
    add_common(cmd, plan=True)
    return parser


def _load_inputs(args):
    cluster = profiles.load_cluster_profile(args.cluster, lenient=args.lenient)
    model = profiles.load_model_profile(args.model, lenient=args.lenient)
    training = profiles.load_training_config(args.training, lenient=args.lenient)
    return cluster, model, training


def _load_plan(path: str) -> Plan:
    import json

    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: not valid JSON ({exc})") from exc
    return Plan.from_dict(doc)


def _cmd_synth_profile(args) -> int:
    if not (args.model or args.cluster or args.training):
        raise _UsageError("choose at least one of --model, --cluster, --training")
    model = cluster = training = None
    if args.model:
        if args.layers is None or args.hidden is None or args.seq is None:
            raise _UsageError("--model requires --layers, --hidden, and --seq")
        model = profiles.synth_transformer_profile(args.layers, args.hidden, args.seq)
    if args.cluster:
        if args.devices is None:
            raise _UsageError("--cluster requires --devices")
        devices_per_node = args.devices_per_node or min(args.devices, 8)
        table = []
        size = 2
        while size <= devices_per_node:
            table.append(BandwidthEntry(INTRA_NODE, size, args.intra_bandwidth,
                                        args.intra_latency))
            size *= 2
        if devices_per_node < args.devices:
            size = 2
            while size <= args.devices:
                table.append(BandwidthEntry(INTER_NODE, size, args.inter_bandwidth,
                                            args.inter_latency))
                size *= 2
        cluster = ClusterProfile(
            n_devices=args.devices,
            devices_per_node=devices_per_node,
            device_flops=args.device_flops,
            device_memory_bytes=args.device_memory,
            memory_reserve_fraction=args.memory_reserve,
            bandwidth_table=tuple(table),
        )
        cluster.validate()
    if args.training:
        if args.global_batch is None:
            raise _UsageError("--training requires --global-batch")
        training = TrainingConfig(global_batch=args.global_batch)
        training.validate()
    profiles.save_profiles(args.output, cluster=cluster, model=model, training=training)
    return EXIT_OK


def _search_config(args) -> SearchConfig:
    constraints = StrategyConstraints(
        allow_internode_tp=getattr(args, "allow_internode_tp", False))
    return SearchConfig(
        memory_buckets=args.memory_buckets,
        constraints=constraints,
        transitions=args.transitions == "on",
        max_pp=args.max_pp,
        time_limit_s=args.time_limit,
        jobs=args.jobs,
    )


def _cmd_search(args) -> int:
    cluster, model, training = _load_inputs(args)
    cfg = _search_config(args)
    plan = search.optimize(model, cluster, training, cfg)
    with open(args.output, "w", encoding="utf-8") as fh:
        fh.write(dumps_canonical(plan.to_dict(), sort_keys=False))
    print(f"time={format_float(plan.predicted_iteration_time)} "
          f"pp={plan.pp} microbatch={plan.microbatch}")
    return EXIT_OK


def _cmd_simulate(args) -> int:
    cluster, model, training = _load_inputs(args)
    plan = _load_plan(args.plan)
    violations = search.validate_plan(plan, model, cluster, training,
                                      transitions=args.transitions == "on")
    if violations:
        for v in violations:
            print(f"violation: {v}", file=sys.stderr)
        return EXIT_INVALID_PLAN
    result = pipesim.simulate(plan, model, cluster, training,
                              transitions=args.transitions == "on",
                              overlap_p2p=args.overlap_p2p)
    doc = {
        "makespan": result.makespan,
        "stage_peak_memory": list(result.stage_peak_memory),
        "bubble_fraction": result.bubble_fraction,
        "n_events": len(result.trace),
    }
    with open(args.output, "w", encoding="utf-8") as fh:
        fh.write(dumps_canonical(doc, sort_keys=False))
    if args.trace:
        with open(args.trace, "w", encoding="utf-8") as fh:
            fh.write(pipesim.trace_to_jsonl(result))
    print(f"makespan={format_float(result.makespan)} "
          f"bubble={format_float(result.bubble_fraction)}")
    return EXIT_OK


def build_report(plan: Plan, model, cluster, training, *, transitions: bool = True,
                 overlap_p2p: bool = False) -> dict:
    """Assemble the report bundle; every number is a raw cost-model output."""
    comparison = pipesim.compare_with_analytic(
        plan, model, cluster, training, transitions=transitions, overlap_p2p=overlap_p2p)
    sim = comparison["sim_result"]
    stage_group_cache: dict[int, object] = {}

    layer_rows = []
    for li, layer in enumerate(model.layers):
        stage = plan.stage_of_layer(li)
        s = plan.layer_strategies[li]
        t = costmodel.layer_time(layer, s, plan.microbatch, model.seq_len,
                                 model.hidden_size, cluster, training)
        a, _b = plan.stage_ranges[stage]
        trans = 0.0
        if transitions and li > a:
            devices_per_stage = cluster.n_devices // plan.pp
            group = stage_group_cache.setdefault(
                devices_per_stage, collectives.comm_group(cluster, devices_per_stage))
            boundary = plan.microbatch * model.seq_len * layer.boundary_bytes_per_token
            trans = costmodel.transition_time(plan.layer_strategies[li - 1], s,
                                              boundary, group, cluster)
        in_flight = costmodel.in_flight_microbatches(plan.pp, stage, plan.n_microbatches)
        mem = costmodel.layer_memory(layer, s, plan.microbatch, model.seq_len,
                                     in_flight, training)
        dp_sync = (1.0 - training.comm_overlap_fraction) * costmodel.layer_dp_sync_time(
            layer, s, cluster, training)
        layer_rows.append({
            "layer": li,
            "stage": stage,
            "tp": s.tp, "dp": s.dp, "zero_stage": s.zero_stage,
            "sp": s.sp, "recompute": s.recompute,
            "fwd_compute": t.fwd_compute,
            "bwd_compute": t.bwd_compute,
            "recompute_extra": t.recompute_extra,
            "tp_comm": t.tp_comm,
            "zero3_param_gather": t.zero3_param_gather,
            "transition_time": trans,
            "time_total": t.per_microbatch_total() + trans,
            "dp_sync_time": dp_sync,
            "param_bytes": mem.param_bytes,
            "grad_bytes": mem.grad_bytes,
            "optimizer_bytes": mem.optimizer_bytes,
            "activation_bytes": mem.activation_bytes,
        })

    p2p = search.stage_p2p_times(model, cluster, plan.pp, plan.stage_ranges, plan.microbatch)
    stage_rows = []
    for i, cost in enumerate(plan.cost_breakdown):
        a, b = plan.stage_ranges[i]
        stage_rows.append({
            "stage": i,
            "layer_start": a,
            "layer_end": b,
            "per_microbatch_time": cost.per_microbatch_time,
            "transition_time": cost.transition_time,
            "dp_sync_time": cost.dp_sync_time,
            "p2p_time": p2p[i],
            "peak_memory_bytes": cost.peak_memory_bytes,
            "sim_peak_memory_bytes": sim.stage_peak_memory[i],
        })

    return {
        "plan": {
            "pp": plan.pp,
            "microbatch": plan.microbatch,
            "n_microbatches": plan.n_microbatches,
            "predicted_iteration_time": plan.predicted_iteration_time,
        },
        "layers": layer_rows,
        "stages": stage_rows,
        "total": {
            "predicted_iteration_time": plan.predicted_iteration_time,
            "sim_makespan": comparison["sim_makespan"],
            "analytic_time": comparison["analytic_time"],
            "relative_gap": comparison["relative_gap"],
            "bubble_fraction": sim.bubble_fraction,
        },
    }


_CSV_COLUMNS = [
    "kind", "index", "stage", "tp", "dp", "zero_stage", "sp", "recompute",
    "fwd_compute", "bwd_compute", "recompute_extra", "tp_comm",
    "zero3_param_gather", "transition_time", "time_total", "dp_sync_time",
    "p2p_time", "memory_bytes",
]


def _csv_value(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return format_float(value)
    return str(value)


def report_to_csv(bundle: dict) -> str:
    """Rows: one per layer, one per stage, one total."""
    lines = [",".join(_CSV_COLUMNS)]
    for row in bundle["layers"]:
        lines.append(",".join(_csv_value(v) for v in [
            "layer", row["layer"], row["stage"], row["tp"], row["dp"],
            row["zero_stage"], row["sp"], row["recompute"],
            row["fwd_compute"], row["bwd_compute"], row["recompute_extra"],
            row["tp_comm"], row["zero3_param_gather"], row["transition_time"],
            row["time_total"], row["dp_sync_time"], None, None,
        ]))
    for row in bundle["stages"]:
        lines.append(",".join(_csv_value(v) for v in [
            "stage", row["stage"], row["stage"], None, None, None, None, None,
            None, None, None, None, None, row["transition_time"],
            row["per_microbatch_time"], row["dp_sync_time"], row["p2p_time"],
            row["peak_memory_bytes"],
        ]))
    total = bundle["total"]
    lines.append(",".join(_csv_value(v) for v in [
        "total", None, None, None, None, None, None, None,
        None, None, None, None, None, None,
        total["predicted_iteration_time"], None, None, None,
    ]))
    return "\n".join(lines) + "\n"


def _cmd_report(args) -> int:
    cluster, model, training = _load_inputs(args)
    plan = _load_plan(args.plan)
    violations = search.validate_plan(plan, model, cluster, training,
                                      transitions=args.transitions == "on")
    if violations:
        for v in violations:
            print(f"violation: {v}", file=sys.stderr)
        return EXIT_INVALID_PLAN
    bundle = build_report(plan, model, cluster, training,
                          transitions=args.transitions == "on",
                          overlap_p2p=args.overlap_p2p)
    with open(args.output + ".json", "w", encoding="utf-8") as fh:
        fh.write(dumps_canonical(bundle, sort_keys=False))
    with open(args.output + ".csv", "w", encoding="utf-8") as fh:
        fh.write(report_to_csv(bundle))
    print(f"report written to {args.output}.json and {args.output}.csv")
    return EXIT_OK


def _cmd_validate(args) -> int:
    cluster, model, training = _load_inputs(args)
    plan = _load_plan(args.plan)
    violations = search.validate_plan(plan, model, cluster, training,
                                      transitions=args.transitions == "on")
    if violations:
        for v in violations:
            print(f"violation: {v}")
        return EXIT_INVALID_PLAN
    print("plan is valid")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        if args.command == "synth-profile":
            return _cmd_synth_profile(args)
        if args.command == "search":
            return _cmd_search(args)
        if args.command == "simulate":
            return _cmd_simulate(args)
        if args.command == "report":
            return _cmd_report(args)
        if args.command == "validate":
            return _cmd_validate(args)
        raise _UsageError(f"unknown command {args.command!r}")
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NoFeasiblePlan as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (ParseError, ValidationError, PlannerError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


def entry_point() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry_point()
