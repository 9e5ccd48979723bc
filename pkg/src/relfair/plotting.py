"""Figures written next to the CSV/JSON artifacts (headless backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return path


def lorenz_figure(points: np.ndarray, path, title: str = "Lorenz curve of losses") -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    ax.plot(points[:, 0], points[:, 1], marker="o", ms=3, label="losses")
    ax.plot([0, 1], [0, 1], ls="--", color="grey", lw=1, label="equality")
    ax.set_xlabel("fraction of clients (sorted by loss)")
    ax.set_ylabel("cumulative share of loss")
    ax.set_title(title)
    ax.legend()
    return _save(fig, path)


def phi_sweep_figure(phis, r_ab, eps, path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.errorbar(phis, r_ab, yerr=eps, marker="o", capsize=3)
    ax.set_xlabel("phi")
    ax.set_ylabel("relative unfairness")
    ax.set_title("Grid solutions across phi")
    return _save(fig, path)


def trajectory_figure(rounds, series: dict[str, np.ndarray], path, ylabel: str, log: bool = False) -> Path:
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    for label, values in series.items():
        ax.plot(rounds, values, label=label)
    if log:
        ax.set_yscale("log")
    ax.set_xlabel("round")
    ax.set_ylabel(ylabel)
    ax.legend()
    return _save(fig, path)


def comparison_figure(labels, values, path, ylabel: str) -> Path:
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    ax.bar(range(len(labels)), values)
    ax.set_xticks(range(len(labels)), labels, rotation=20)
    ax.set_ylabel(ylabel)
    return _save(fig, path)
