"""Brute-force ground truth at desk scale.

Exhaustive grid minimax with exact inner CVaR oracles, a two-sided saddle
probe, a grid prox oracle for tiny n, and a high-accuracy saddle solver for
quadratic clients used as the reference point in rate experiments.
"""

from __future__ import annotations

import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import minimize

from .ambiguity import (
    AmbiguityPair,
    CappedSimplex,
    DualPoint,
    NumericalFailure,
    UnsupportedGeometry,
    cvar_max,
    cvar_max_batch,
    cvar_min,
    cvar_min_batch,
    dual_prox,
)
from .fairness import FairnessDomainError, relative_unfairness
from .losses import ClientObjective, ContractViolation

MAX_GRID_CELLS = 10**8
_CHUNK = 1 << 18


class GridTooLarge(ValueError):
    pass


@dataclass(frozen=True)
class ThetaGrid:
    """Rectangular grid; ``ranges`` holds one ``(lo, hi, step)`` per coordinate."""

    ranges: tuple[tuple[float, float, float], ...]

    def __post_init__(self):
        object.__setattr__(self, "ranges", tuple(tuple(float(v) for v in r) for r in self.ranges))
        for lo, hi, step in self.ranges:
            if not (step > 0 and hi >= lo and math.isfinite(lo) and math.isfinite(hi)):
                raise ContractViolation(f"bad grid range ({lo}, {hi}, {step})")
        if self.n_cells > MAX_GRID_CELLS:
            raise GridTooLarge(f"grid has {self.n_cells} cells, above the limit of {MAX_GRID_CELLS}")

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(int(math.floor((hi - lo) / step + 1e-9)) + 1 for lo, hi, step in self.ranges)

    @property
    def n_cells(self) -> int:
        return math.prod(self.shape)

    @property
    def steps(self) -> np.ndarray:
        return np.array([r[2] for r in self.ranges])

    def axes(self) -> list[np.ndarray]:
        return [lo + step * np.arange(k) for (lo, _, step), k in zip(self.ranges, self.shape)]

    def points(self, flat_idx) -> np.ndarray:
        sub = np.unravel_index(np.asarray(flat_idx), self.shape)
        return np.column_stack([ax[s] for ax, s in zip(self.axes(), sub)])

    def index_of(self, flat_idx: int) -> tuple[int, ...]:
        return tuple(int(v) for v in np.unravel_index(int(flat_idx), self.shape))


@dataclass(frozen=True, eq=False)
class SaddleSolution:
    theta_star: np.ndarray
    value: float
    a_star: np.ndarray
    b_star: np.ndarray
    phi: float = 0.0
    flat_index: int | None = None


@dataclass(frozen=True, eq=False)
class SweepRow:
    phi: float
    solution: SaddleSolution
    r_ab: float
    eps_grid: float


def discrepancy_value(losses, pair: AmbiguityPair) -> tuple[float, np.ndarray, np.ndarray]:
    top, a = cvar_max(losses, pair.A)
    low, b = cvar_min(losses, pair.B)
    return top - pair.phi * low, a, b


def _loss_matrix(objs, thetas) -> np.ndarray:
    return np.stack([o.value_batch(thetas) for o in objs])


def _scan(objs, grid: ThetaGrid, A: CappedSimplex, B: CappedSimplex, phis: Sequence[float], workers: int = 1):
    """Best flat index and value of ``cvar_max - phi cvar_min`` for every phi."""
    phis = np.asarray(phis, dtype=float)
    starts = range(0, grid.n_cells, _CHUNK)

    def chunk(start):
        thetas = grid.points(np.arange(start, min(start + _CHUNK, grid.n_cells)))
        L = _loss_matrix(objs, thetas)
        obj = cvar_max_batch(L, A)[None, :] - phis[:, None] * cvar_min_batch(L, B)[None, :]
        k = np.argmin(obj, axis=1)
        return start + k, obj[np.arange(len(phis)), k]

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            parts = list(ex.map(chunk, starts))
    else:
        parts = [chunk(s) for s in starts]
    best_idx = np.full(len(phis), -1, dtype=np.int64)
    best_val = np.full(len(phis), np.inf)
    for idx, val in parts:  # chunk order, strict < keeps the earliest tie
        better = val < best_val
        best_idx[better] = idx[better]
        best_val[better] = val[better]
    return best_idx, best_val


def _solution_at(objs, grid, pair, flat_idx) -> SaddleSolution:
    theta = grid.points([flat_idx])[0]
    losses = np.array([o.value(theta) for o in objs])
    value, a, b = discrepancy_value(losses, pair)
    return SaddleSolution(theta, value, a, b, pair.phi, int(flat_idx))


def grid_minimax(objs: Sequence[ClientObjective], grid: ThetaGrid, pair: AmbiguityPair, workers: int = 1) -> SaddleSolution:
    """Grid argmin of ``cvar_max(L, A) - phi cvar_min(L, B)``; ties go to the lexicographically smallest theta.

    ``a_star``/``b_star`` are the sort-oracle maximizer/minimizer at ``theta_star``.
    """
    idx, _ = _scan(objs, grid, pair.A, pair.B, [pair.phi], workers)
    return _solution_at(objs, grid, pair, idx[0])


def _r_ab_at(objs, theta, pair) -> float:
    return relative_unfairness(np.array([o.value(theta) for o in objs]), pair)


def grid_epsilon(objs, grid: ThetaGrid, pair: AmbiguityPair, flat_idx: int) -> float:
    """Largest change of the relative unfairness between a cell and its axis neighbours."""
    sub = grid.index_of(flat_idx)
    theta = grid.points([flat_idx])[0]
    base = _r_ab_at(objs, theta, pair)
    eps = 0.0
    for k, step in enumerate(grid.steps):
        for sgn in (-1, 1):
            j = sub[k] + sgn
            if 0 <= j < grid.shape[k]:
                nb = theta.copy()
                nb[k] = grid.axes()[k][j]
                try:
                    eps = max(eps, abs(_r_ab_at(objs, nb, pair) - base))
                except FairnessDomainError:
                    eps = math.inf
    return eps


def phi_sweep(objs, grid: ThetaGrid, A: CappedSimplex, B: CappedSimplex, phi_values, workers: int = 1) -> list[SweepRow]:
    """Grid solutions and their relative unfairness for each phi, from one grid pass."""
    phis = [float(p) for p in phi_values]
    if not phis:
        raise ContractViolation("phi_values is empty")
    if any(not 0.0 <= p < 1.0 for p in phis) or any(q < p for p, q in zip(phis, phis[1:])):
        raise ContractViolation("phi_values must be sorted ascending in [0, 1)")
    idx, _ = _scan(objs, grid, A, B, phis, workers)
    rows = []
    for phi, k in zip(phis, idx):
        pair = AmbiguityPair(A, B, phi)
        sol = _solution_at(objs, grid, pair, k)
        rows.append(SweepRow(phi, sol, _r_ab_at(objs, sol.theta_star, pair), grid_epsilon(objs, grid, pair, k)))
    return rows


# -- saddle verification --------------------------------------------------------------------------


def _as_lambda(lam, pair):
    return lam.lam if isinstance(lam, DualPoint) else np.asarray(lam, dtype=float)


def saddle_check(
    objs: Sequence[ClientObjective],
    pair: AmbiguityPair,
    theta,
    lam,
    tol: float,
    probe_steps=None,
    probe_radius: int = 2,
) -> bool:
    """Two-sided saddle test for ``F(theta, lam) = sum lam_i f_i(theta)``.

    The theta side is probed on ``theta + probe_steps * k`` for integer
    offsets ``k`` in ``[-probe_radius, probe_radius]^d``.
    """
    theta = np.asarray(theta, dtype=float)
    lam = _as_lambda(lam, pair)
    losses = np.array([o.value(theta) for o in objs])
    top, low = cvar_max(losses, pair.A)[0], cvar_min(losses, pair.B)[0]
    best_dual = (top - pair.phi * low) / (1.0 - pair.phi)
    here = float(lam @ losses)
    if best_dual - here > tol:
        return False
    steps = np.broadcast_to(np.asarray(1e-2 if probe_steps is None else probe_steps, dtype=float), theta.shape)
    offsets = np.array(list(itertools.product(range(-probe_radius, probe_radius + 1), repeat=theta.size)), dtype=float)
    probes = theta + offsets * steps
    vals = lam @ _loss_matrix(objs, probes)
    return bool(here <= vals.min() + tol)


def dual_certificate(objs: Sequence[ClientObjective], pair: AmbiguityPair, theta, slack: float = 0.0) -> DualPoint:
    """Near-maximizing dual point with the smallest weighted gradient at ``theta``.

    Solves ``min ||sum lam_i grad f_i(theta)||^2`` over ``lam`` in the
    integrated set with ``<lam, L> >= max - slack``.  This is the dual weight
    that best explains ``theta`` as a minimizer.
    """
    theta = np.asarray(theta, dtype=float)
    n, phi = pair.n, pair.phi
    losses = np.array([o.value(theta) for o in objs])
    grads = np.stack([o.gradient(theta) for o in objs])
    top, a0 = cvar_max(losses, pair.A)
    low, b0 = cvar_min(losses, pair.B)
    best = (top - phi * low) / (1.0 - phi)
    scale = max(1.0, abs(best))

    def lam_of(x):
        return pair.combine(x[:n], x[n:])

    def fun(x):
        g = lam_of(x) @ grads
        return float(g @ g)

    cons = [
        {"type": "eq", "fun": lambda x: x[:n].sum() - 1.0},
        {"type": "eq", "fun": lambda x: x[n:].sum() - 1.0},
        {"type": "ineq", "fun": lambda x: (lam_of(x) @ losses - best + slack) / scale},
    ]
    bounds = [(0.0, pair.A.cap)] * n + [(0.0, pair.B.cap)] * n
    res = minimize(fun, np.concatenate([a0, b0]), method="SLSQP", bounds=bounds, constraints=cons,
                   options={"ftol": 1e-14, "maxiter": 500})
    x = np.clip(res.x, 0.0, None)
    a = x[:n] / x[:n].sum()
    b = x[n:] / x[n:].sum()
    return DualPoint.from_witness(a, b, pair)


# -- prox oracle ------------------------------------------------------------------------------------------------


def _capped_grid(n: int, cap: float, points: int) -> tuple[np.ndarray, float]:
    """Grid on the capped simplex spanning its bounding box, so a tight cap never leaves it empty.

    The first ``n - 1`` coordinates run over ``points`` values each and the last
    one closes the sum.  Returns the feasible points and the axis spacing.
    """
    lo, hi = max(0.0, 1.0 - (n - 1) * cap), min(cap, 1.0)
    if n == 1:
        return np.ones((1, 1)), 0.0
    axis = np.linspace(lo, hi, points)
    head = np.array(list(itertools.product(axis, repeat=n - 1)))
    last = 1.0 - head.sum(axis=1)
    keep = (last >= lo - 1e-12) & (last <= hi + 1e-12)
    pts = np.column_stack([head[keep], np.clip(last[keep], 0.0, None)])
    spacing = (hi - lo) / (points - 1)
    return pts, spacing


def _local_moves(n: int, radius: int) -> np.ndarray:
    moves = [c for c in itertools.product(range(-radius, radius + 1), repeat=n - 1)]
    return np.array([list(c) + [-sum(c)] for c in moves], dtype=float)


def brute_force_prox(s, lambda_prev, sigma: float, pair: AmbiguityPair, points: int = 51, levels: int = 4) -> DualPoint:
    """Grid argmin of the prox objective over ``A x B``, then ``levels`` rounds of 5x zoom.

    Only for ``n <= 3``.
    """
    n = pair.n
    if n > 3:
        raise UnsupportedGeometry(f"brute-force prox supports n <= 3, got n = {n}")
    s = np.asarray(s, dtype=float)
    lp = _as_lambda(lambda_prev, pair)
    phi, w = pair.phi, 1.0 - pair.phi
    A_pts, step_a = _capped_grid(n, pair.A.cap, points)
    if phi > 0:
        B_pts, step_b = _capped_grid(n, pair.B.cap, points)
    else:
        B_pts, step_b = pair.B.uniform()[None, :], 0.0

    def evaluate(a_set, b_set):
        # lam - lp = u_i - v_j with u = a/w - lp and v = phi b / w
        u = a_set / w - lp
        v = phi * b_set / w
        fa = -(a_set @ s) / w + np.einsum("ij,ij->i", u, u) / (2.0 * sigma)
        fb = phi * (b_set @ s) / w + np.einsum("ij,ij->i", v, v) / (2.0 * sigma)
        obj = fa[:, None] + fb[None, :] - (u @ v.T) / sigma
        i, j = np.unravel_index(np.argmin(obj), obj.shape)
        return a_set[i], b_set[j], obj[i, j]

    def neighbours(v, step, cap):
        cand = v + step * moves
        return cand[np.all((cand >= -1e-15) & (cand <= cap + 1e-15), axis=1)].clip(0.0, None)

    a, b, best = evaluate(A_pts, B_pts)
    moves = _local_moves(n, 5)
    for _ in range(levels):
        step_a, step_b = step_a / 5.0, step_b / 5.0
        cand_a = neighbours(a, step_a, pair.A.cap) if n > 1 else a[None, :]
        cand_b = neighbours(b, step_b, pair.B.cap) if phi > 0 and n > 1 else b[None, :]
        a2, b2, val = evaluate(cand_a, cand_b)
        if val <= best:
            a, b, best = a2, b2, val
    return DualPoint.from_witness(a, b, pair)


# -- quadratic saddle ---------------------------------------------------------------------------------------------


def weighted_minimizer(objs: Sequence[ClientObjective], lam) -> np.ndarray:
    """Closed-form ``argmin_theta sum lam_i f_i(theta)`` for quadratic clients."""
    H = np.zeros((objs[0].dim, objs[0].dim))
    h = np.zeros(objs[0].dim)
    for w, o in zip(lam, objs):
        G, hv, _ = o.quadratic_stats()
        H += w * (G + o.regularizer * np.eye(o.dim))
        h += w * hv
    eig = np.linalg.eigvalsh(H)
    if eig[0] <= 0:
        raise ContractViolation("weighted objective is not strongly convex at this dual point")
    return np.linalg.solve(H, h)


@dataclass(frozen=True, eq=False)
class QuadraticSaddle:
    theta_star: np.ndarray
    dual: DualPoint
    value: float
    residual: float
    iterations: int


def exact_saddle(
    objs: Sequence[ClientObjective],
    pair: AmbiguityPair,
    tol: float = 1e-13,
    max_iter: int = 100_000,
) -> QuadraticSaddle:
    """Saddle point of ``sum lam_i f_i(theta)`` over ``R^d x Lambda`` for quadratic clients.

    Maximizes the concave dual function ``g(lam) = min_theta F(theta, lam)``,
    whose gradient is the loss vector at the weighted least-squares solution,
    by accelerated projected ascent with backtracking and restarts.  Stops when
    the gradient-mapping residual drops below ``tol`` (relative to the loss
    scale) or stops improving at a level below ``1e-6``; round-off in the
    dual function usually sets that floor near ``1e-8``.  ``theta_star`` is
    the weighted least-squares solution at the final dual point.
    """
    if any(o.kind != "quadratic-regression" for o in objs):
        raise ContractViolation("exact_saddle needs quadratic-regression clients")

    def oracle(lam):
        theta = weighted_minimizer(objs, lam)
        L = np.array([o.value(theta) for o in objs])
        return float(lam @ L), L, theta

    def curvature(lam, theta):
        J = np.stack([o.gradient(theta) for o in objs])
        H = sum(w * o.hessian(theta) for w, o in zip(lam, objs))
        return float(np.linalg.norm(J @ np.linalg.solve(H, J.T), 2))

    x = DualPoint.uniform(pair)
    gx, Lx, th = oracle(x.lam)
    scale = max(1.0, float(np.max(np.abs(Lx))))
    sigma = 1.0 / max(curvature(x.lam, th), 1e-12)
    y, gy, Ly = x, gx, Lx
    t = 1.0
    res = best_res = math.inf
    stall = 0
    for it in range(1, max_iter + 1):
        while True:
            x_new = dual_prox(Ly, y, sigma, pair, tol=1e-15)
            d = x_new.lam - y.lam
            g_new, L_new, _ = oracle(x_new.lam)
            if g_new >= gy + float(Ly @ d) - float(d @ d) / (2.0 * sigma) - 1e-15 * scale:
                break
            sigma *= 0.5
        res = float(np.max(np.abs(d))) / sigma
        if res < best_res:
            best_res, stall = res, 0
        else:
            stall += 1
        if res <= tol * scale or (stall >= 200 and best_res <= 1e-6 * scale):
            x, gx, Lx = x_new, g_new, L_new
            break
        if float(Ly @ (x_new.lam - x.lam)) < 0:
            # ascent stalled under momentum: restart from the best point
            t = 1.0
            y, gy, Ly = x, gx, Lx
            continue
        t_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        beta = (t - 1.0) / t_new
        y = DualPoint(
            x_new.lam + beta * (x_new.lam - x.lam),
            x_new.a + beta * (x_new.a - x.a),
            x_new.b + beta * (x_new.b - x.b),
        )
        x, gx, Lx, t = x_new, g_new, L_new, t_new
        try:
            gy, Ly, _ = oracle(y.lam)
        except ContractViolation:
            t = 1.0
            y, gy, Ly = x, gx, Lx
        sigma *= 1.25
    else:
        raise NumericalFailure(f"dual ascent did not reach residual {tol} in {max_iter} iterations", last=x)
    theta = weighted_minimizer(objs, x.lam)
    polished = _polish(objs, pair, x, theta)
    if polished is not None:
        x, theta = polished
    losses = np.array([o.value(theta) for o in objs])
    return QuadraticSaddle(theta, x, float(x.lam @ losses), res, it)


def _polish(objs, pair, dual: DualPoint, theta, iters: int = 30):
    """Newton on the KKT system with the face structure of ``dual`` held fixed.

    Unknowns are theta, the free witness coordinates and one loss level per
    witness.  Equations: the weighted gradient vanishes, free clients sit at
    their witness's level, witnesses sum to one.  Returns ``None`` when Newton
    leaves the face or does not reduce the residual.
    """
    phi, w = pair.phi, 1.0 - pair.phi
    edge = 1e-7
    a, b = dual.a.copy(), dual.b.copy()
    blocks = [(a, pair.A.cap, 1.0 / w)]
    if phi > 0.0:
        blocks.append((b, pair.B.cap, -phi / w))
    frees = []
    for v, cap, _ in blocks:
        free = np.flatnonzero((v > edge) & (v < cap - edge))
        fixed = np.setdiff1d(np.arange(v.size), free)
        v[fixed] = np.where(v[fixed] >= cap - edge, cap, 0.0)
        frees.append(free)
    theta = np.array(theta, dtype=float)
    d = theta.size
    L0 = np.array([o.value(theta) for o in objs])
    levels = [float(L0[f].mean()) if f.size else 0.0 for f in frees]

    def residual(theta, levels):
        lam = pair.combine(a, b)
        grads = np.stack([o.gradient(theta) for o in objs])
        L = np.array([o.value(theta) for o in objs])
        F = [lam @ grads]
        for (v, _, _), free, lev in zip(blocks, frees, levels):
            if free.size:
                F.append(L[free] - lev)
                F.append([v.sum() - 1.0])
        return np.concatenate([np.ravel(f) for f in F]), lam, grads

    F, lam, grads = residual(theta, levels)
    res0 = np.linalg.norm(F)
    active = [k for k, f in enumerate(frees) if f.size]
    n_free = sum(frees[k].size for k in active)
    width = d + n_free + len(active)
    for _ in range(iters):
        H = sum(li * o.hessian(theta) for li, o in zip(lam, objs))
        J = np.zeros((F.size, width))
        J[:d, :d] = H
        col, row = d, d
        for j, k in enumerate(active):
            free, coef = frees[k], blocks[k][2]
            J[:d, col : col + free.size] = coef * grads[free].T
            J[row : row + free.size, :d] = grads[free]
            J[row : row + free.size, d + n_free + j] = -1.0
            J[row + free.size, col : col + free.size] = 1.0
            col += free.size
            row += free.size + 1
        try:
            step = np.linalg.lstsq(J, -F, rcond=None)[0]
        except np.linalg.LinAlgError:
            return None
        theta = theta + step[:d]
        col = d
        for j, k in enumerate(active):
            free = frees[k]
            blocks[k][0][free] += step[col : col + free.size]
            levels[k] += step[d + n_free + j]
            col += free.size
        F, lam, grads = residual(theta, levels)
        if np.linalg.norm(step) <= 1e-15 * (1.0 + np.linalg.norm(theta)):
            break
    for v, cap, _ in blocks:
        if np.any(v < -1e-12) or np.any(v > cap + 1e-12):
            return None
    if not np.linalg.norm(F) <= res0:
        return None
    a = np.clip(a, 0.0, pair.A.cap)
    b = np.clip(b, 0.0, pair.B.cap)
    return DualPoint.from_witness(a, b, pair), theta
