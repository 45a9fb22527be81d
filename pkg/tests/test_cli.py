import json
from pathlib import Path

from hybridplan.cli import main

FIXTURES = Path(__file__).parent / "fixtures"
CLUSTER = str(FIXTURES / "cluster_2dev.json")
MODEL = str(FIXTURES / "model_2layer.json")
TRAINING = str(FIXTURES / "training_g8.json")
TINY_CLUSTER = str(FIXTURES / "cluster_tiny_memory.json")
GOLDEN = FIXTURES / "golden_plan.json"


def run_search(out_path, *extra):
    return main(["search", "--cluster", CLUSTER, "--model", MODEL,
                 "--training", TRAINING, "-o", str(out_path), *extra])


def test_synth_profile_writes_model(tmp_path):
    out = tmp_path / "m.json"
    rc = main(["synth-profile", "--model", "--layers", "4", "--hidden", "64",
               "--seq", "128", "-o", str(out)])
    assert rc == 0
    doc = json.loads(out.read_text())
    assert len(doc["model"]["layers"]) == 4
    assert doc["model"]["layers"][0]["param_count"] == 12 * 64 * 64 + 13 * 64


def test_synth_profile_cluster_and_training(tmp_path):
    out = tmp_path / "ct.json"
    rc = main(["synth-profile", "--cluster", "--devices", "8",
               "--devices-per-node", "4", "--training", "--global-batch", "16",
               "-o", str(out)])
    assert rc == 0
    doc = json.loads(out.read_text())
    assert doc["cluster"]["n_devices"] == 8
    spans = {(e["span"], e["group_size"]) for e in doc["cluster"]["bandwidth_table"]}
    assert ("intra_node", 2) in spans and ("inter_node", 8) in spans
    assert doc["training"]["global_batch"] == 16


def test_synth_profile_missing_flag_is_usage_error(tmp_path, capsys):
    rc = main(["synth-profile", "--model", "--layers", "4", "--seq", "128",
               "-o", str(tmp_path / "m.json")])
    assert rc == 2
    assert "--hidden" in capsys.readouterr().err


def test_unwritable_output_is_io_error(tmp_path):
    rc = main(["synth-profile", "--model", "--layers", "1", "--hidden", "8",
               "--seq", "8", "-o", str(tmp_path / "missing_dir" / "m.json")])
    assert rc == 3


def test_search_reproduces_golden_plan(tmp_path, capsys):
    out = tmp_path / "plan.json"
    assert run_search(out) == 0
    line = capsys.readouterr().out.strip().splitlines()[-1]
    assert line.startswith("time=") and "pp=" in line and "microbatch=" in line
    assert out.read_bytes() == GOLDEN.read_bytes()


def test_search_deterministic_across_jobs(tmp_path):
    first = tmp_path / "a.json"
    second = tmp_path / "b.json"
    assert run_search(first) == 0
    assert run_search(second, "--jobs", "4") == 0
    assert first.read_bytes() == second.read_bytes() == GOLDEN.read_bytes()


def test_search_infeasible_exit_code(tmp_path, capsys):
    rc = main(["search", "--cluster", TINY_CLUSTER, "--model", MODEL,
               "--training", TRAINING, "-o", str(tmp_path / "plan.json")])
    assert rc == 4
    err = capsys.readouterr().err
    assert "stage" in err and "budget" in err


def test_search_missing_file_is_io_error(tmp_path):
    rc = main(["search", "--cluster", str(tmp_path / "nope.json"), "--model", MODEL,
               "--training", TRAINING, "-o", str(tmp_path / "plan.json")])
    assert rc == 3


def test_simulate_on_golden_plan(tmp_path):
    sim = tmp_path / "sim.json"
    trace = tmp_path / "trace.jsonl"
    rc = main(["simulate", "--cluster", CLUSTER, "--model", MODEL,
               "--training", TRAINING, "--plan", str(GOLDEN),
               "-o", str(sim), "--trace", str(trace)])
    assert rc == 0
    doc = json.loads(sim.read_text())
    plan = json.loads(GOLDEN.read_text())
    predicted = plan["predicted_iteration_time"]
    assert abs(doc["makespan"] - predicted) / predicted <= 0.05
    lines = [json.loads(line) for line in trace.read_text().splitlines()]
    assert len(lines) == doc["n_events"]
    assert all(set(line) == {"time", "device_stage", "kind", "microbatch_id", "duration"}
               for line in lines)


def test_report_row_count_and_reconciliation(tmp_path):
    base = tmp_path / "report"
    rc = main(["report", "--cluster", CLUSTER, "--model", MODEL,
               "--training", TRAINING, "--plan", str(GOLDEN), "-o", str(base)])
    assert rc == 0
    plan = json.loads(GOLDEN.read_text())
    n_layers = len(plan["layer_strategies"])
    pp = plan["pp"]

    csv_lines = (tmp_path / "report.csv").read_text().splitlines()
    assert len(csv_lines) - 1 == n_layers + pp + 1  # data rows: layers + stages + total

    bundle = json.loads((base.with_suffix(".json")).read_text())
    for stage_row in bundle["stages"]:
        layer_sum = sum(row["time_total"] for row in bundle["layers"]
                        if row["stage"] == stage_row["stage"])
        assert layer_sum == stage_row["per_microbatch_time"]
    assert bundle["total"]["predicted_iteration_time"] == plan["predicted_iteration_time"]
    assert "relative_gap" in bundle["total"]


def test_report_deterministic(tmp_path):
    a, b = tmp_path / "ra", tmp_path / "rb"
    for base in (a, b):
        assert main(["report", "--cluster", CLUSTER, "--model", MODEL,
                     "--training", TRAINING, "--plan", str(GOLDEN), "-o", str(base)]) == 0
    assert (tmp_path / "ra.json").read_bytes() == (tmp_path / "rb.json").read_bytes()
    assert (tmp_path / "ra.csv").read_bytes() == (tmp_path / "rb.csv").read_bytes()


def test_validate_golden_then_corrupted(tmp_path, capsys):
    rc = main(["validate", "--cluster", CLUSTER, "--model", MODEL,
               "--training", TRAINING, "--plan", str(GOLDEN)])
    assert rc == 0

    doc = json.loads(GOLDEN.read_text())
    doc["stage_ranges"] = [[0, 1], [0, 2]]
    doc["pp"] = 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(doc))
    rc = main(["validate", "--cluster", CLUSTER, "--model", MODEL,
               "--training", TRAINING, "--plan", str(bad)])
    assert rc == 5
    assert "violation" in capsys.readouterr().out


def test_search_then_validate_composes(tmp_path):
    out = tmp_path / "plan.json"
    assert run_search(out) == 0
    rc = main(["validate", "--cluster", CLUSTER, "--model", MODEL,
               "--training", TRAINING, "--plan", str(out)])
    assert rc == 0


def test_simulate_rejects_corrupt_plan(tmp_path, capsys):
    doc = json.loads(GOLDEN.read_text())
    doc["predicted_iteration_time"] *= 3.0
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(doc))
    rc = main(["simulate", "--cluster", CLUSTER, "--model", MODEL,
               "--training", TRAINING, "--plan", str(bad),
               "-o", str(tmp_path / "sim.json")])
    assert rc == 5


def test_unknown_subcommand_is_usage_error():
    assert main(["frobnicate"]) == 2
