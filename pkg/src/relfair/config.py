"""Versioned JSON experiment configuration."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any

import jsonschema

SCHEMA_VERSION = 1

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "train_fraction": 0.8,
    "output_dir": "out",
    "partition": {"n_clients": 20, "concentration": 0.5},
    "model": {"regularizer": 1e-3, "hidden": 8},
    "algorithm": {"variant": "scaff-pd-ia", "rounds": 100, "J": 5, "theta_domain": {"kind": "unconstrained"}},
    "noise": {"delta_g": 0.0, "mode": "additive", "batch_size": 1},
    "ambiguity": {"alpha_A": 0.2, "alpha_B": 0.2, "phi": 0.2},
    "rates": {"mode": "fixed", "eta": 0.05, "tau": 1.0, "sigma": 0.2},
    "grid": {
        "ranges": [[-35.0, -25.0, 0.05], [0.0, 1.0, 0.005], [0.0, 1.0, 0.005]],
        "phi_values": [0.0, 0.01, 0.02, 0.03, 0.04, 0.05],
    },
}

DATASET_DEFAULTS: dict[str, dict[str, Any]] = {
    "synthetic-classification": {"n_samples": 30000, "n_features": 10, "n_classes": 5, "class_sep": 2.0, "noise_sd": 1.0, "seed": 0},
    "synthetic-regression": {"n_clients": 5, "d": 3, "n_samples": 400, "truth_scale": 2.0, "noise_sd": 0.5, "seed": 0},
    "csv": {"client_column": None},
    "builtin": {},
}

SCHEDULE_DEFAULTS = {"tau0": 1.0, "gamma0": 0.002, "c_alpha": 0.5, "strict": False}


class ConfigError(ValueError):
    """Configuration rejected; ``errors`` lists ``field.path: message`` strings."""

    def __init__(self, errors: list[str]):
        super().__init__("invalid configuration:\n  " + "\n  ".join(errors))
        self.errors = errors


def load_schema(name: str) -> dict:
    text = resources.files("relfair.schemas").joinpath(f"{name}.schema.json").read_text()
    return json.loads(text)


def _path(err: jsonschema.ValidationError) -> str:
    return ".".join(str(p) for p in err.absolute_path) or "<root>"


def schema_errors(raw: dict, schema_name: str = "config") -> list[str]:
    validator = jsonschema.Draft202012Validator(load_schema(schema_name))
    return sorted(f"{_path(e)}: {e.message}" for e in validator.iter_errors(raw))


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


@dataclass(frozen=True)
class ExperimentConfig:
    """Fully resolved configuration; ``raw`` keeps the merged JSON document."""

    raw: dict
    base_dir: Path

    def __getitem__(self, key):
        return self.raw[key]

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def dataset_kind(self) -> str:
        return self.raw["dataset"]["kind"]

    @property
    def is_regression(self) -> bool:
        return self.raw["model"]["kind"] == "quadratic-regression"

    def with_overrides(self, **changes) -> "ExperimentConfig":
        return ExperimentConfig(_merge(self.raw, changes), self.base_dir)

    def dataset_path(self) -> Path:
        p = Path(self.raw["dataset"]["path"])
        return p if p.is_absolute() else self.base_dir / p

    def snapshot(self) -> dict:
        return copy.deepcopy(self.raw)


def resolve(raw: dict, base_dir: Path | str = ".") -> ExperimentConfig:
    """Validate ``raw`` against the schema, fill defaults, and check cross-field rules."""
    errors = schema_errors(raw)
    if errors:
        raise ConfigError(errors)
    merged = _merge(DEFAULTS, raw)
    kind = merged["dataset"]["kind"]
    merged["dataset"] = _merge(DATASET_DEFAULTS[kind], merged["dataset"])
    if merged["rates"]["mode"] == "schedule":
        merged["rates"] = _merge(SCHEDULE_DEFAULTS, merged["rates"])
    else:
        merged["rates"] = _merge(DEFAULTS["rates"], merged["rates"])
    merged["partition"].setdefault("seed", merged["seed"])
    regression = kind == "synthetic-regression" or (kind == "builtin" and merged["dataset"]["name"] == "penguins")
    merged["model"].setdefault("kind", "quadratic-regression" if regression else "multinomial-logistic")
    merged["model"].setdefault("fit_intercept", kind == "builtin")
    cfg = ExperimentConfig(merged, Path(base_dir))

    problems = []
    if kind == "csv" and not cfg.dataset_path().is_file():
        problems.append(f"dataset.path: file not found: {cfg.dataset_path()}")
    if regression and merged["model"]["kind"] != "quadratic-regression":
        problems.append("model.kind: regression datasets need quadratic-regression")
    if merged["algorithm"]["variant"] == "afl-pd" and merged["rates"]["mode"] != "fixed":
        problems.append("rates.mode: afl-pd needs fixed rates")
    dom = merged["algorithm"]["theta_domain"]
    if dom["kind"] == "ball" and "radius" not in dom:
        problems.append("algorithm.theta_domain.radius: required for a ball domain")
    if dom["kind"] == "box" and not ("lo" in dom and "hi" in dom and dom["lo"] < dom["hi"]):
        problems.append("algorithm.theta_domain: box needs lo < hi")
    phis = merged["grid"]["phi_values"]
    if any(b < a for a, b in zip(phis, phis[1:])):
        problems.append("grid.phi_values: must be sorted ascending")
    if merged["ambiguity"]["phi"] == "auto" and merged["model"]["kind"] == "tiny-mlp":
        problems.append("ambiguity.phi: 'auto' needs Hessians, which tiny-mlp does not provide")
    if problems:
        raise ConfigError(problems)
    return cfg


def load_config(path: Path | str) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError([f"<file>: config not found: {path}"]) from None
    except json.JSONDecodeError as exc:
        raise ConfigError([f"<file>: not valid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}"]) from None
    if not isinstance(raw, dict):
        raise ConfigError(["<root>: config must be a JSON object"])
    return resolve(raw, path.parent)
