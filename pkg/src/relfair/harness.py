"""Experiment orchestration: data construction, runs, comparisons, artifacts."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import warnings
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import jsonschema
import numpy as np

from . import __version__, plotting
from .ambiguity import AmbiguityPair, CappedSimplex, cvar_min, integrated_l1_norm
from .config import ConfigError, ExperimentConfig, load_schema
from .fairness import (
    FairnessDomainError,
    PhiSelection,
    discrepancy,
    fairness_report,
    gini,
    gini_transformed,
    lorenz_points,
    negative_utility,
    relative_unfairness,
    select_phi,
)
from .losses import (
    ClientObjective,
    CsvSchema,
    DataShard,
    NoiseModel,
    PartitionSpec,
    load_csv,
    partition_dirichlet,
    shards_by_client,
    smoothness_constants,
    synth_classification,
    synth_regression,
    train_val_split,
)
from .optimizer import AlgorithmSpec, FixedRates, GrowingSchedule, RunResult, ScheduleParams, ThetaDomain, run
from .oracle import ThetaGrid, phi_sweep

PENGUIN_FEATURES = ("bill_depth_mm", "flipper_length_mm")


@dataclass(eq=False)
class Problem:
    """Per-client train/validation shards plus their objectives."""

    train: list[ClientObjective]
    val: list[ClientObjective]
    partition_hash: str

    @property
    def n(self) -> int:
        return len(self.train)


@dataclass(eq=False)
class RunArtifact:
    config: dict
    result: RunResult
    metrics: dict
    files: dict[str, str] = field(default_factory=dict)


# -- data ----------------------------------------------------------------------


def _builtin_path(name: str) -> Path:
    return Path(str(resources.files("relfair.data").joinpath(name)))


def _shards(cfg: ExperimentConfig) -> list[DataShard]:
    ds_cfg = cfg["dataset"]
    kind = ds_cfg["kind"]
    if kind == "synthetic-regression":
        rng = np.random.default_rng(ds_cfg["seed"])
        truths = ds_cfg["truth_scale"] * rng.normal(size=(ds_cfg["n_clients"], ds_cfg["d"]))
        return synth_regression(ds_cfg["d"], ds_cfg["n_samples"], truths, ds_cfg["noise_sd"], ds_cfg["seed"] + 1)
    if kind == "builtin":
        path = _builtin_path("penguins_first10.csv")
        if ds_cfg["name"] == "penguins":
            return shards_by_client(load_csv(path, CsvSchema(PENGUIN_FEATURES, "bill_length_mm", "species")))
        data = load_csv(path, CsvSchema(PENGUIN_FEATURES + ("bill_length_mm",), "species"))
    elif kind == "csv":
        data = load_csv(cfg.dataset_path(), CsvSchema(tuple(ds_cfg["feature_columns"]), ds_cfg["label_column"], ds_cfg["client_column"]))
        if data.clients is not None:
            return shards_by_client(data)
    else:
        data = synth_classification(ds_cfg["n_samples"], ds_cfg["n_features"], ds_cfg["n_classes"],
                                    ds_cfg["class_sep"], ds_cfg["noise_sd"], ds_cfg["seed"])
    if not cfg.is_regression:
        labels = np.asarray(data.labels)
        if not np.all(labels == np.round(labels)):
            raise ConfigError(["dataset.label_column: classification needs integer class labels"])
    p = cfg["partition"]
    return partition_dirichlet(data, PartitionSpec(p["n_clients"], p["concentration"], p["seed"]))


def partition_hash(shards: Sequence[DataShard]) -> str:
    h = hashlib.sha256()
    for s in shards:
        for arr in (s.features, s.labels):
            a = np.ascontiguousarray(arr, dtype=float)
            h.update(str(a.shape).encode())
            h.update(a.tobytes())
    return h.hexdigest()


def build_problem(cfg: ExperimentConfig) -> Problem:
    shards = _shards(cfg)
    rng = np.random.default_rng(cfg.seed)
    m = cfg["model"]
    n_classes = None
    if not cfg.is_regression:
        n_classes = int(max(s.labels.max() for s in shards)) + 1
    train, val, parts = [], [], []
    for s in shards:
        tr, va = train_val_split(s, cfg["train_fraction"], rng) if cfg["train_fraction"] < 1 else (s, s)
        kw = dict(n_classes=n_classes, hidden=m["hidden"], fit_intercept=m["fit_intercept"])
        train.append(ClientObjective(m["kind"], tr, regularizer=m["regularizer"], **kw))
        val.append(ClientObjective(m["kind"], va, regularizer=0.0, **kw))
        parts += [tr, va]
    return Problem(train, val, partition_hash(parts))


# -- algorithm assembly ------------------------------------------------------------


def make_pair(cfg: ExperimentConfig, n: int, phi: float) -> AmbiguityPair:
    amb = cfg["ambiguity"]
    return AmbiguityPair(CappedSimplex(n, amb["alpha_A"]), CappedSimplex(n, amb["alpha_B"]), phi)


def make_schedule(cfg: ExperimentConfig, objs, pair: AmbiguityPair):
    r = cfg["rates"]
    if r["mode"] == "fixed":
        return FixedRates(r["eta"], r["tau"], r["sigma"])
    consts = smoothness_constants(objs, ThetaDomain(**cfg["algorithm"]["theta_domain"]).diameter)
    params = ScheduleParams.from_constants(
        r["tau0"], r["gamma0"], cfg["algorithm"]["J"], consts, integrated_l1_norm(pair),
        beta=r.get("beta"), c_alpha=r["c_alpha"],
    )
    return GrowingSchedule(params, strict=r["strict"])


def make_spec(cfg: ExperimentConfig, pair: AmbiguityPair, variant: str | None = None) -> AlgorithmSpec:
    alg, nz = cfg["algorithm"], cfg["noise"]
    return AlgorithmSpec(
        variant or alg["variant"], pair, alg["rounds"], J=alg["J"],
        theta_domain=ThetaDomain(**alg["theta_domain"]),
        noise=NoiseModel(nz["delta_g"], nz["mode"], nz["batch_size"]),
    )


def _constants_or_none(objs):
    try:
        return smoothness_constants(objs)
    except Exception:
        return None


def resolve_phi(cfg: ExperimentConfig, problem: Problem, workers: int = 1) -> tuple[float, PhiSelection | None]:
    """Numeric phi as given, or the adaptive choice from a phi = 0 pre-run."""
    phi = cfg["ambiguity"]["phi"]
    if phi != "auto":
        return float(phi), None
    pair0 = make_pair(cfg, problem.n, 0.0)
    pre = run(problem.train, make_spec(cfg, pair0, "scaff-pd"), make_schedule(cfg, problem.train, pair0),
              seed=cfg.seed, workers=workers)
    losses = np.array([o.value(pre.theta) for o in problem.train])
    _, b0 = cvar_min(losses, pair0.B)
    sel = select_phi(problem.train, pre.theta, pre.dual.a, b0)
    return sel.phi_star, sel


# -- metrics -------------------------------------------------------------------------------


def predict(obj: ClientObjective, theta) -> np.ndarray:
    return np.argmax(obj._logits(np.asarray(theta, dtype=float)), axis=1)


def client_accuracies(objs: Sequence[ClientObjective], theta) -> np.ndarray:
    return np.array([float(np.mean(predict(o, theta) == o.shard.labels)) for o in objs])


def accuracy_summary(acc: np.ndarray) -> dict:
    """All-client mean and means over the worst / best 20% of clients by accuracy."""
    k = max(1, int(math.ceil(0.2 * acc.size)))
    s = np.sort(acc)
    return {"all": float(acc.mean()), "worst_20": float(s[:k].mean()), "best_20": float(s[-k:].mean())}


def _partial_report(lv, pair) -> dict:
    n = lv.size
    fields = {
        "r_ab": lambda: relative_unfairness(lv, pair),
        "discrepancy": lambda: discrepancy(lv, pair),
        "gini": lambda: gini(lv),
        "gini_transformed": lambda: gini_transformed(lv),
        "ratio_2020": lambda: relative_unfairness(lv, AmbiguityPair.symmetric(n, 0.2)),
        "palma": lambda: relative_unfairness(lv, AmbiguityPair(CappedSimplex(n, 0.1), CappedSimplex(n, 0.4))),
        "atkinson_inf": lambda: _atkinson(lv),
        "utility": lambda: negative_utility(lv, pair),
    }
    out = {}
    for key, fn in fields.items():
        try:
            out[key] = fn()
        except FairnessDomainError:
            out[key] = None
    return out


def _atkinson(lv) -> float:
    mean = float(np.mean(lv))
    if mean <= 0:
        raise FairnessDomainError("Atkinson index undefined for all-zero losses")
    return 1.0 - float(np.min(lv)) / mean


def _report(losses, pair):
    """Full fairness report; metrics undefined for these losses (zero bottom share) are None."""
    losses = np.asarray(losses, dtype=float)
    try:
        return fairness_report(losses, pair).to_dict()
    except FairnessDomainError:
        return _partial_report(losses, pair)


def evaluate(problem: Problem, theta, pair: AmbiguityPair, regression: bool) -> dict:
    val_losses = np.array([o.value(theta) for o in problem.val])
    train_losses = np.array([o.value(theta) for o in problem.train])
    return {
        "report": _report(val_losses, pair),
        "train_report": _report(train_losses, pair),
        "accuracy": None if regression else accuracy_summary(client_accuracies(problem.val, theta)),
        "val_losses": val_losses.tolist(),
    }


# -- artifact writing -----------------------------------------------------------------------


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def _clean(o):
    """Replace non-finite floats by None so the output is strict JSON."""
    if isinstance(o, dict):
        return {k: _clean(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_clean(v) for v in o]
    if isinstance(o, (float, np.floating)):
        return float(o) if math.isfinite(o) else None
    if isinstance(o, np.integer):
        return int(o)
    return o


def dump_json(obj, path: Path, schema: str | None = None) -> None:
    obj = _clean(obj)
    if schema is not None:
        jsonschema.validate(obj, load_schema(schema))
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def write_csv(path: Path, header: Sequence[str], rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow(["" if v is None else (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for v in row])
    path.write_text(buf.getvalue())


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out: Path, command: str, config, partition: str | None, names: Sequence[str]) -> dict:
    files = {n: _sha256(out / n) for n in sorted(names) if n.endswith((".csv", ".json"))}
    manifest = {
        "schema_version": 1,
        "command": command,
        "package_version": __version__,
        "config": config,
        "partition_hash": partition,
        "files": files,
    }
    dump_json(manifest, out / "manifest.json", "manifest")
    return manifest


def _trajectory_rows(result: RunResult):
    n = len(result.records[0].losses) if result.records else 0
    header = ["round"] + [f"loss_{i}" for i in range(n)] + [f"lambda_{i}" for i in range(n)] + ["r_ab", "gini", "dist2"]
    rows = [[rec.r, *rec.losses.tolist(), *rec.lam.tolist(), rec.r_ab, rec.gini, rec.dist2] for rec in result.records]
    return header, rows


# -- commands ------------------------------------------------------------------------------


def execute(cfg: ExperimentConfig, workers: int = 1, problem: Problem | None = None, variant: str | None = None):
    """Run one configured algorithm; returns (problem, result, metrics dict)."""
    problem = problem or build_problem(cfg)
    phi, selection = resolve_phi(cfg, problem, workers)
    variant = variant or cfg["algorithm"]["variant"]
    pair = make_pair(cfg, problem.n, phi)
    spec = make_spec(cfg, pair, variant)
    schedule = make_schedule(cfg, problem.train, spec.effective().pair)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        result = run(problem.train, spec, schedule, seed=cfg.seed, workers=workers,
                     constants=_constants_or_none(problem.train) if cfg.is_regression else None)
    metrics = {
        "schema_version": 1,
        "command": "run",
        "variant": variant,
        "phi": phi,
        "phi_selection": None if selection is None else selection.__dict__,
        "rates_mode": schedule.label,
        "schedule_violations": list(getattr(schedule, "violations", [])),
        "warnings": sorted({str(w.message) for w in caught}),
        "partition_hash": problem.partition_hash,
        "n_clients": problem.n,
        "rounds": cfg["algorithm"]["rounds"],
        "seed": cfg.seed,
        "theta": result.theta.tolist(),
        **evaluate(problem, result.theta, pair, cfg.is_regression),
    }
    return problem, result, metrics


def cmd_run(cfg: ExperimentConfig, out: Path | str | None = None, workers: int = 1) -> RunArtifact:
    out = Path(out or cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    problem, result, metrics = execute(cfg, workers)
    dump_json(metrics, out / "metrics.json", "metrics")
    names = ["metrics.json"]
    val_losses = np.array(metrics["val_losses"])
    try:
        pts = lorenz_points(val_losses)
        write_csv(out / "lorenz.csv", ["x", "ell", "ell_minus_half_x"], pts.tolist())
        plotting.lorenz_figure(pts, out / "lorenz.png")
        names.append("lorenz.csv")
    except FairnessDomainError:
        pass
    header, rows = _trajectory_rows(result)
    write_csv(out / "trajectory.csv", header, rows)
    names.append("trajectory.csv")
    if result.records:
        rounds = [rec.r for rec in result.records]
        series = {"relative unfairness": np.array([np.nan if rec.r_ab is None else rec.r_ab for rec in result.records])}
        plotting.trajectory_figure(rounds, series, out / "trajectory.png", "train-loss relative unfairness")
    manifest = write_manifest(out, "run", cfg.snapshot(), problem.partition_hash, names)
    return RunArtifact(cfg.snapshot(), result, metrics, manifest["files"])


def _row(label: str, seed: int, m: dict) -> dict:
    rep = m["report"] or {}
    acc = m["accuracy"] or {}
    return {
        "label": label, "seed": seed, "variant": m["variant"], "phi": m["phi"],
        "acc_all": acc.get("all"), "acc_worst_20": acc.get("worst_20"), "acc_best_20": acc.get("best_20"),
        "r_ab": rep.get("r_ab"), "gini": rep.get("gini"), "partition_hash": m["partition_hash"],
    }


COMPARE_COLUMNS = ("label", "seed", "variant", "phi", "acc_all", "acc_worst_20", "acc_best_20", "r_ab", "gini", "partition_hash")


def compare(configs: Sequence[ExperimentConfig], seeds: Sequence[int] | None = None, workers: int = 1) -> dict:
    """Run every config on a shared partition per seed and aggregate."""
    if not configs:
        raise ConfigError(["<args>: compare needs at least one config"])
    labels = [c.raw.get("name") or c["algorithm"]["variant"] for c in configs]
    if len(set(labels)) != len(labels):
        labels = [f"{l}#{i}" for i, l in enumerate(labels)]
    seeds = list(seeds) if seeds else [configs[0].seed]
    rows = []
    for seed in seeds:
        problems = []
        for cfg in configs:
            over = cfg.with_overrides(seed=seed, partition={"seed": seed}, dataset={"seed": seed} if "seed" in cfg["dataset"] else {})
            problems.append((over, build_problem(over)))
        ns = {p.n for _, p in problems}
        if len(ns) != 1:
            raise ConfigError([f"<configs>: mismatched client counts {sorted(ns)}"])
        hashes = {p.partition_hash for _, p in problems}
        if len(hashes) != 1:
            raise ConfigError(["<configs>: configs produce different partitions; compare needs a shared partition"])
        for label, (over, problem) in zip(labels, problems):
            _, _, m = execute(over, workers, problem)
            rows.append(_row(label, seed, m))
    summary = {}
    for label in labels:
        mine = [r for r in rows if r["label"] == label]
        summary[label] = {
            k: (float(np.median([r[k] for r in mine])) if all(r[k] is not None for r in mine) else None)
            for k in ("acc_all", "acc_worst_20", "acc_best_20", "r_ab", "gini")
        }
        summary[label]["wins_r_ab"] = 0
        summary[label]["wins_acc_all"] = 0
    for seed in seeds:
        per = [r for r in rows if r["seed"] == seed]
        for key, best in (("r_ab", min), ("acc_all", max)):
            vals = [r[key] for r in per if r[key] is not None]
            if vals:
                target = best(vals)
                for r in per:
                    if r[key] == target:
                        summary[r["label"]][f"wins_{key}"] += 1
    return {"schema_version": 1, "command": "compare", "rows": rows, "summary": summary, "seeds": seeds}


def cmd_compare(configs: Sequence[ExperimentConfig], out: Path | str, seeds=None, workers: int = 1) -> dict:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    report = compare(configs, seeds, workers)
    dump_json(report, out / "metrics.json", "metrics")
    write_csv(out / "comparison.csv", COMPARE_COLUMNS, [[r[c] for c in COMPARE_COLUMNS] for r in report["rows"]])
    labels = list(report["summary"])
    r_ab = [report["summary"][l]["r_ab"] or float("nan") for l in labels]
    plotting.comparison_figure(labels, r_ab, out / "comparison.png", "median relative unfairness")
    write_manifest(out, "compare", [c.snapshot() for c in configs], report["rows"][0]["partition_hash"],
                   ["metrics.json", "comparison.csv"])
    return report


def cmd_exact(cfg: ExperimentConfig, out: Path | str | None = None, workers: int = 1) -> dict:
    out = Path(out or cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    if not cfg.is_regression:
        raise ConfigError(["model.kind: exact grid solves need quadratic-regression clients"])
    problem = build_problem(cfg.with_overrides(train_fraction=1.0))
    objs = problem.train
    grid = ThetaGrid(tuple(tuple(r) for r in cfg["grid"]["ranges"]))
    if len(grid.shape) != objs[0].dim:
        raise ConfigError([f"grid.ranges: {len(grid.shape)} ranges for a {objs[0].dim}-dimensional model"])
    A = CappedSimplex(problem.n, cfg["ambiguity"]["alpha_A"])
    B = CappedSimplex(problem.n, cfg["ambiguity"]["alpha_B"])
    rows = phi_sweep(objs, grid, A, B, cfg["grid"]["phi_values"], workers)
    d = objs[0].dim
    header = ["phi"] + [f"theta_{k}" for k in range(d)] + ["value", "r_ab", "eps_grid"]
    write_csv(out / "phi_sweep.csv", header,
              [[r.phi, *r.solution.theta_star.tolist(), r.solution.value, r.r_ab, r.eps_grid] for r in rows])
    steps = []
    for r0, r1 in zip(rows, rows[1:]):
        eps = max(r0.eps_grid, r1.eps_grid)
        steps.append({"phi": r0.phi, "phi_next": r1.phi, "r_ab": r0.r_ab, "r_ab_next": r1.r_ab, "eps_grid": eps,
                      "non_increasing": bool(r1.r_ab <= r0.r_ab + eps)})
    eps_all = max(r.eps_grid for r in rows)
    metrics = {
        "schema_version": 1,
        "command": "exact",
        "grid_cells": grid.n_cells,
        "rows": [{"phi": r.phi, "theta_star": r.solution.theta_star.tolist(), "value": r.solution.value,
                  "r_ab": r.r_ab, "eps_grid": r.eps_grid} for r in rows],
        "summary": {
            "monotone_within_grid": all(s["non_increasing"] for s in steps),
            "strict_decrease": bool(rows[-1].r_ab < rows[0].r_ab - eps_all),
            "eps_grid": eps_all,
            "steps": steps,
        },
    }
    dump_json(metrics, out / "metrics.json", "metrics")
    plotting.phi_sweep_figure([r.phi for r in rows], [r.r_ab for r in rows], [r.eps_grid for r in rows], out / "phi_sweep.png")
    write_manifest(out, "exact", cfg.snapshot(), problem.partition_hash, ["phi_sweep.csv", "metrics.json"])
    return metrics


def read_losses(path: Path | str) -> np.ndarray:
    """Loss column of a CSV: the column named ``loss``, else the only column."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ConfigError([f"{path}: empty file"]) from None
        col = header.index("loss") if "loss" in header else (0 if len(header) == 1 else None)
        if col is None:
            raise ConfigError([f"{path}: need a 'loss' column or a single column"])
        values = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                values.append(float(row[col]))
            except (ValueError, IndexError):
                raise ConfigError([f"{path}: line {lineno}, column {header[col]!r}: not a number"]) from None
    if not values:
        raise ConfigError([f"{path}: no loss values"])
    return np.array(values)


def cmd_metrics(losses_csv, alpha_A: float, alpha_B: float, phi: float, out: Path | str) -> dict:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    lv = read_losses(losses_csv)
    pair = AmbiguityPair(CappedSimplex(lv.size, alpha_A), CappedSimplex(lv.size, alpha_B), phi)
    metrics = {"schema_version": 1, "command": "metrics", "n": int(lv.size), "report": _report(lv, pair)}
    dump_json(metrics, out / "metrics.json", "metrics")
    names = ["metrics.json"]
    try:
        pts = lorenz_points(lv)
        write_csv(out / "lorenz.csv", ["x", "ell", "ell_minus_half_x"], pts.tolist())
        plotting.lorenz_figure(pts, out / "lorenz.png")
        names.append("lorenz.csv")
    except FairnessDomainError:
        pass
    write_manifest(out, "metrics", {"losses": str(losses_csv), "alpha_A": alpha_A, "alpha_B": alpha_B, "phi": phi}, None, names)
    return metrics
