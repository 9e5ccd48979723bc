import csv
import hashlib
import json

import jsonschema
import numpy as np
import pytest

from relfair import harness
from relfair.cli import main
from relfair.config import ConfigError, load_config, load_schema, resolve

SMALL = {
    "schema_version": 1,
    "dataset": {"kind": "synthetic-classification", "n_samples": 800},
    "partition": {"n_clients": 5},
    "algorithm": {"rounds": 5},
}

REGRESSION_1D = {
    "schema_version": 1,
    "dataset": {"kind": "synthetic-regression", "n_clients": 3, "d": 1, "n_samples": 50},
    "model": {"regularizer": 0.0},
    "ambiguity": {"alpha_A": 0.5, "alpha_B": 0.5},
    "grid": {"ranges": [[-6.0, 6.0, 0.01]], "phi_values": [0.0, 0.2, 0.4]},
}


def write_config(tmp_path, raw, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(raw))
    return str(p)


def merged(base, **over):
    out = json.loads(json.dumps(base))
    for k, v in over.items():
        out[k] = {**out.get(k, {}), **v} if isinstance(v, dict) else v
    return out


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


# -- configuration ------------------------------------------------------------------------------


def test_validate_config_reports_field_paths(tmp_path, capsys):
    bad = merged(SMALL, algorithm={"rounds": -1, "J": 1}, ambiguity={"alpha_A": 0.0})
    assert main(["validate-config", "--config", write_config(tmp_path, bad)]) == 2
    err = capsys.readouterr().err
    for path in ("algorithm.rounds", "algorithm.J", "ambiguity.alpha_A"):
        assert path in err


def test_validate_config_prints_resolved_defaults(tmp_path, capsys):
    assert main(["validate-config", "--config", write_config(tmp_path, SMALL)]) == 0
    snap = json.loads(capsys.readouterr().out)
    assert snap["rates"] == {"mode": "fixed", "eta": 0.05, "tau": 1.0, "sigma": 0.2}
    assert snap["model"]["kind"] == "multinomial-logistic"
    assert snap["partition"]["seed"] == 0


def test_cross_field_rules():
    with pytest.raises(ConfigError, match="afl-pd"):
        resolve(merged(SMALL, algorithm={"variant": "afl-pd"}, rates={"mode": "schedule"}))
    with pytest.raises(ConfigError, match="radius"):
        resolve(merged(SMALL, algorithm={"theta_domain": {"kind": "ball"}}))
    with pytest.raises(ConfigError, match="tiny-mlp"):
        resolve(merged(SMALL, model={"kind": "tiny-mlp"}, ambiguity={"phi": "auto"}))
    with pytest.raises(ConfigError, match="dataset.path"):
        resolve({"schema_version": 1, "dataset": {"kind": "csv", "path": "missing.csv", "feature_columns": ["a"], "label_column": "y"}})


def test_unparseable_config_names_the_location(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{"schema_version": 1,\n "dataset": }')
    with pytest.raises(ConfigError, match="line 2"):
        load_config(p)


def test_unknown_keys_are_rejected():
    with pytest.raises(ConfigError, match="algorithm"):
        resolve(merged(SMALL, algorithm={"learning_rate": 0.1}))


# -- run -----------------------------------------------------------------------------------------


def test_run_is_byte_identical_on_replay_and_across_workers(tmp_path):
    cfg = write_config(tmp_path, merged(SMALL, noise={"delta_g": 0.3, "mode": "minibatch", "batch_size": 4}))
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "b")]) == 0
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "c"), "--workers", "3"]) == 0
    for name in ("metrics.json", "trajectory.csv", "lorenz.csv", "manifest.json"):
        ref = (tmp_path / "a" / name).read_bytes()
        assert (tmp_path / "b" / name).read_bytes() == ref
        assert (tmp_path / "c" / name).read_bytes() == ref


def test_run_artifacts_match_manifest_and_schema(tmp_path):
    cfg = write_config(tmp_path, SMALL)
    out = tmp_path / "out"
    assert main(["run", "--config", cfg, "--out", str(out)]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    jsonschema.validate(manifest, load_schema("manifest"))
    assert set(manifest["files"]) == {"metrics.json", "lorenz.csv", "trajectory.csv"}
    for name, digest in manifest["files"].items():
        assert sha(out / name) == digest
    metrics = json.loads((out / "metrics.json").read_text())
    jsonschema.validate(metrics, load_schema("metrics"))
    assert metrics["n_clients"] == 5 and len(metrics["val_losses"]) == 5
    assert 0.0 <= metrics["accuracy"]["worst_20"] <= metrics["accuracy"]["all"] <= metrics["accuracy"]["best_20"] <= 1.0
    assert (out / "lorenz.png").stat().st_size > 0 and (out / "trajectory.png").stat().st_size > 0
    with open(out / "trajectory.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["round"]) for r in rows] == [1, 2, 3, 4, 5]
    for r in rows:
        assert abs(sum(float(r[f"lambda_{i}"]) for i in range(5)) - 1.0) < 1e-12


def test_seed_override_changes_the_partition(tmp_path):
    cfg = load_config(write_config(tmp_path, SMALL))
    p0 = harness.build_problem(cfg)
    p1 = harness.build_problem(cfg.with_overrides(seed=1, partition={"seed": 1}))
    assert p0.partition_hash != p1.partition_hash
    assert harness.build_problem(cfg).partition_hash == p0.partition_hash


def test_auto_phi_on_quadratic_clients(tmp_path):
    raw = merged(REGRESSION_1D, ambiguity={"phi": "auto"}, model={"regularizer": 0.01}, algorithm={"rounds": 30})
    cfg = load_config(write_config(tmp_path, raw))
    _, result, metrics = harness.execute(cfg)
    sel = metrics["phi_selection"]
    assert sel is not None and 0.0 <= metrics["phi"] < 1.0
    assert metrics["phi"] == pytest.approx(sel["phi_star"])
    assert len(result.records) == 30


def test_schedule_mode_records_violations(tmp_path):
    raw = merged(REGRESSION_1D, rates={"mode": "schedule"}, model={"regularizer": 0.01}, ambiguity={"phi": 0.05},
                 algorithm={"rounds": 10})
    cfg = load_config(write_config(tmp_path, raw))
    _, _, metrics = harness.execute(cfg)
    assert metrics["rates_mode"] == "schedule"
    assert any("1200" in v for v in metrics["schedule_violations"])


def test_csv_dataset_with_client_column(tmp_path):
    rng = np.random.default_rng(0)
    lines = ["a,b,y,client"]
    for i in range(60):
        a, b = rng.normal(size=2)
        lines.append(f"{a},{b},{int(a + b > 0)},{i % 3}")
    (tmp_path / "d.csv").write_text("\n".join(lines) + "\n")
    raw = {"schema_version": 1, "dataset": {"kind": "csv", "path": "d.csv", "feature_columns": ["a", "b"],
                                            "label_column": "y", "client_column": "client"},
           "algorithm": {"rounds": 3}}
    cfg = load_config(write_config(tmp_path, raw))
    problem, _, metrics = harness.execute(cfg)
    assert problem.n == 3 and metrics["accuracy"] is not None


def test_penguins_builtin_run(tmp_path):
    raw = {"schema_version": 1, "dataset": {"kind": "builtin", "name": "penguins"}, "model": {"regularizer": 0.01},
           "ambiguity": {"alpha_A": 0.5, "alpha_B": 0.5}, "rates": {"mode": "fixed", "eta": 1e-5, "tau": 1e-5, "sigma": 0.1},
           "algorithm": {"rounds": 3}, "train_fraction": 1.0}
    art = harness.cmd_run(load_config(write_config(tmp_path, raw)), tmp_path / "out")
    assert art.metrics["n_clients"] == 3 and art.metrics["accuracy"] is None


# -- compare -----------------------------------------------------------------------------------------


def test_compare_two_variants_on_one_partition(tmp_path):
    a = write_config(tmp_path, merged(SMALL, name="ia"), "a.json")
    b = write_config(tmp_path, merged(SMALL, name="avg", algorithm={"variant": "fedavg"}), "b.json")
    out = tmp_path / "cmp"
    assert main(["compare", "--config", a, "--config", b, "--seeds", "2", "--out", str(out)]) == 0
    report = json.loads((out / "metrics.json").read_text())
    jsonschema.validate(report, load_schema("metrics"))
    rows = report["rows"]
    assert len(rows) == 4
    for seed in (0, 1):
        assert len({r["partition_hash"] for r in rows if r["seed"] == seed}) == 1
    assert rows[0]["partition_hash"] != rows[2]["partition_hash"]
    summary = report["summary"]
    assert set(summary) == {"ia", "avg"}
    assert summary["ia"]["wins_r_ab"] + summary["avg"]["wins_r_ab"] >= 2
    assert (out / "comparison.csv").exists() and (out / "comparison.png").exists()


def test_compare_without_configs_is_a_usage_error(capsys):
    assert main(["compare"]) == 2
    assert "--config" in capsys.readouterr().err


def test_compare_rejects_mismatched_client_counts(tmp_path, capsys):
    a = write_config(tmp_path, SMALL, "a.json")
    b = write_config(tmp_path, merged(SMALL, partition={"n_clients": 4}), "b.json")
    assert main(["compare", "--config", a, "--config", b, "--out", str(tmp_path / "o")]) == 2
    assert "client counts" in capsys.readouterr().err


# -- metrics ------------------------------------------------------------------------------------------


def test_metrics_equal_losses(tmp_path):
    (tmp_path / "l.csv").write_text("loss\n2.0\n2.0\n2.0\n2.0\n2.0\n")
    m = harness.cmd_metrics(tmp_path / "l.csv", 0.2, 0.2, 0.0, tmp_path / "o")
    assert m["report"]["r_ab"] == 1.0 and m["report"]["gini"] == 0.0
    assert (tmp_path / "o" / "lorenz.csv").exists()


def test_metrics_with_a_zero_loss_keeps_defined_measures(tmp_path, capsys):
    (tmp_path / "l.csv").write_text("loss\n0\n1\n")
    assert main(["metrics", str(tmp_path / "l.csv"), "--alpha-A", "0.5", "--alpha-B", "0.5", "--out", str(tmp_path / "o")]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["gini"] == pytest.approx(0.5)
    assert rep["r_ab"] is None


def test_metrics_bad_csv_names_the_line(tmp_path, capsys):
    (tmp_path / "l.csv").write_text("loss\n1.0\nabc\n")
    assert main(["metrics", str(tmp_path / "l.csv"), "--out", str(tmp_path / "o")]) == 2
    assert "line 3" in capsys.readouterr().err


def test_metrics_unnamed_single_column(tmp_path):
    (tmp_path / "l.csv").write_text("value\n1\n2\n3\n4\n")
    np.testing.assert_array_equal(harness.read_losses(tmp_path / "l.csv"), [1, 2, 3, 4])


# -- exact -------------------------------------------------------------------------------------------


def test_exact_sweep_outputs(tmp_path):
    cfg = write_config(tmp_path, REGRESSION_1D)
    assert main(["exact", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    assert main(["exact", "--config", cfg, "--out", str(tmp_path / "b"), "--workers", "2"]) == 0
    assert (tmp_path / "a" / "phi_sweep.csv").read_bytes() == (tmp_path / "b" / "phi_sweep.csv").read_bytes()
    metrics = json.loads((tmp_path / "a" / "metrics.json").read_text())
    jsonschema.validate(metrics, load_schema("metrics"))
    assert [r["phi"] for r in metrics["rows"]] == [0.0, 0.2, 0.4]
    assert len(metrics["summary"]["steps"]) == 2
    assert (tmp_path / "a" / "phi_sweep.png").stat().st_size > 0


def test_exact_single_phi_gives_one_row(tmp_path):
    cfg = write_config(tmp_path, merged(REGRESSION_1D, grid={"phi_values": [0.1]}))
    assert main(["exact", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    with open(tmp_path / "o" / "phi_sweep.csv") as fh:
        rows = list(csv.reader(fh))
    assert len(rows) == 2 and rows[0][0] == "phi"


def test_exact_rejects_classification_and_wrong_grid(tmp_path, capsys):
    assert main(["exact", "--config", write_config(tmp_path, SMALL, "c.json"), "--out", str(tmp_path / "o")]) == 2
    wrong = merged(REGRESSION_1D, grid={"ranges": [[0, 1, 0.5], [0, 1, 0.5]]})
    assert main(["exact", "--config", write_config(tmp_path, wrong), "--out", str(tmp_path / "o")]) == 2
    assert "grid.ranges" in capsys.readouterr().err
