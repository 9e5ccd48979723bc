"""Fairness functionals over a vector of per-client losses."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .ambiguity import AmbiguityPair, CappedSimplex, cvar_max, cvar_min
from .losses import ClientObjective, ContractViolation

PHI_MAX = 1.0 - 1e-6


class FairnessDomainError(ValueError):
    """Ratio metric undefined because the bottom-CVaR of the losses is zero."""


@dataclass(frozen=True)
class FairnessReport:
    r_ab: float
    discrepancy: float
    gini: float
    ratio_2020: float
    palma: float
    atkinson_inf: float
    utility: float
    gini_transformed: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class PhiSelection:
    frak_a: float
    frak_b: float
    frak_c: float
    phi_star: float


def _losses(lv) -> np.ndarray:
    lv = np.asarray(lv, dtype=float)
    if lv.ndim != 1 or lv.size == 0:
        raise ContractViolation("loss vector must be a nonempty 1-d sequence")
    if np.any(lv < 0):
        raise ContractViolation("losses must be nonnegative")
    return lv


def _bottom(lv, B: CappedSimplex) -> float:
    low, _ = cvar_min(lv, B)
    if low <= 0.0:
        raise FairnessDomainError("bottom-CVaR of the losses is zero; ratio metrics are undefined")
    return low


def relative_unfairness(lv, pair: AmbiguityPair) -> float:
    """Top-CVaR over A divided by bottom-CVaR over B."""
    lv = _losses(lv)
    top, _ = cvar_max(lv, pair.A)
    return top / _bottom(lv, pair.B)


def discrepancy(lv, pair: AmbiguityPair) -> float:
    lv = _losses(lv)
    return cvar_max(lv, pair.A)[0] - pair.phi * cvar_min(lv, pair.B)[0]


def negative_utility(lv, pair: AmbiguityPair) -> float:
    lv = _losses(lv)
    return cvar_max(lv, pair.A)[0] / math.sqrt(_bottom(lv, pair.B))


def lorenz_points(lv) -> np.ndarray:
    """Rows ``(x, ell(x), ell(x) - x/2)`` at the polyline knots ``x = k/n``."""
    lv = _losses(lv)
    total = lv.sum()
    if total <= 0:
        raise FairnessDomainError("Lorenz curve undefined for all-zero losses")
    x = np.arange(lv.size + 1) / lv.size
    ell = np.concatenate([[0.0], np.cumsum(np.sort(lv))]) / total
    return np.column_stack([x, ell, ell - x / 2.0])


def gini(lv) -> float:
    """``1 - 2 * integral(ell)`` with the integral evaluated exactly on the polyline."""
    pts = lorenz_points(lv)
    ell = pts[:, 1]
    area = float(np.sum(ell[1:] + ell[:-1])) / (2.0 * (len(ell) - 1))
    return max(1.0 - 2.0 * area, 0.0)


def gini_transformed(lv) -> float:
    """``1 - 2 * integral(ell - x/2)``; sits exactly 0.5 above :func:`gini`."""
    return gini(lv) + 0.5


def classic_measures(lv) -> tuple[float, float, float]:
    """(20:20 ratio, Palma ratio, Atkinson index with infinite aversion) on losses.

    Palma uses the top 10% over the bottom 40%.
    """
    lv = _losses(lv)
    n = lv.size
    ratio_2020 = relative_unfairness(lv, AmbiguityPair.symmetric(n, 0.2))
    palma = relative_unfairness(lv, AmbiguityPair(CappedSimplex(n, 0.1), CappedSimplex(n, 0.4)))
    mean = lv.mean()
    if mean <= 0:
        raise FairnessDomainError("Atkinson index undefined for all-zero losses")
    return ratio_2020, palma, 1.0 - lv.min() / mean


def fairness_report(lv, pair: AmbiguityPair) -> FairnessReport:
    ratio_2020, palma, atkinson = classic_measures(lv)
    return FairnessReport(
        r_ab=relative_unfairness(lv, pair),
        discrepancy=discrepancy(lv, pair),
        gini=gini(lv),
        ratio_2020=ratio_2020,
        palma=palma,
        atkinson_inf=atkinson,
        utility=negative_utility(lv, pair),
        gini_transformed=gini_transformed(lv),
    )


def ratio_bounds_check(lv, pair: AmbiguityPair, C_b: float, C_b_prime: float, rtol: float = 1e-12) -> bool:
    """Whether ``phi + disc/C_b <= r <= phi + disc/C_b'`` holds for these losses."""
    lv = _losses(lv)
    r = relative_unfairness(lv, pair)
    disc = discrepancy(lv, pair)
    lower = pair.phi + disc / C_b
    upper = pair.phi + disc / C_b_prime
    slack = rtol * max(1.0, abs(r))
    return bool(lower <= r + slack and r <= upper + slack)


# -- adaptive phi -----------------------------------------------------------


def approximate_utility(phi, frak_a, frak_b, frak_c):
    """Second-order surrogate of the negative utility as a function of phi."""
    phi = np.asarray(phi, dtype=float)
    return (frak_a + 0.5 * phi**2 * frak_c) / np.sqrt(frak_b + phi * frak_c)


def phi_from_coefficients(frak_a: float, frak_b: float, frak_c: float, c_floor: float = 1e-10) -> float:
    """Stationary point of :func:`approximate_utility`, clamped into [0, 1)."""
    if frak_c <= c_floor:
        phi = frak_a / (2.0 * frak_b)
    else:
        phi = (math.sqrt(frak_b**2 + 2.0 * (1.0 - 0.25) * frak_a * frak_c) - frak_b) / (frak_c * (1.0 + 0.5))
    return min(max(phi, 0.0), PHI_MAX)


def select_phi(
    objs: Sequence[ClientObjective], theta0_star, a0_star, b0_star, max_condition: float = 1e12
) -> PhiSelection:
    """Pick phi from the phi = 0 solution ``(theta0_star, a0_star, b0_star)``.

    The a-weighted Hessian must be well conditioned; add an l2 regularizer to the
    client losses if it is not.
    """
    theta = np.asarray(theta0_star, dtype=float)
    a0 = np.asarray(a0_star, dtype=float)
    b0 = np.asarray(b0_star, dtype=float)
    losses = np.array([o.value(theta) for o in objs])
    H = sum(w * o.hessian(theta) for w, o in zip(a0, objs) if w != 0.0)
    g = sum(w * o.gradient(theta) for w, o in zip(b0, objs) if w != 0.0)
    cond = np.linalg.cond(H)
    if not np.isfinite(cond) or cond > max_condition:
        raise ContractViolation(
            f"weighted Hessian is singular (condition number {cond:.3g}); add a regularizer > 0"
        )
    frak_c = float(g @ np.linalg.solve(H, g))
    frak_a, frak_b = float(a0 @ losses), float(b0 @ losses)
    return PhiSelection(frak_a, frak_b, frak_c, phi_from_coefficients(frak_a, frak_b, frak_c))
