"""Capped simplices and the integrated ambiguity set built from two of them.

A capped simplex ``{a : 0 <= a_i <= c, sum(a) = 1}`` with ``c = 1/(alpha n)``
turns a linear maximization into a CVaR, i.e. the average of the largest
``alpha`` fraction of losses.  The integrated set is the image of ``A x B``
under ``(a, b) -> (a - phi b) / (1 - phi)``; it stays on the unit-sum
hyperplane but may have negative coordinates.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .losses import ContractViolation

ENUMERATION_MAX_N = 12


class NumericalFailure(RuntimeError):
    def __init__(self, message, last=None):
        super().__init__(message)
        self.last = last


class UnsupportedGeometry(ValueError):
    pass


@dataclass(frozen=True)
class CappedSimplex:
    n: int
    alpha: float

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be positive")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")

    @cached_property
    def cap(self) -> float:
        return min(1.0, 1.0 / (self.alpha * self.n))

    @cached_property
    def n_full(self) -> int:
        """Coordinates sitting at the cap in a vertex."""
        return min(self.n, int(math.floor(1.0 / self.cap + 1e-9)))

    @cached_property
    def remainder(self) -> float:
        r = 1.0 - self.n_full * self.cap
        return r if r > 1e-12 else 0.0

    @cached_property
    def support(self) -> int:
        return self.n_full + (self.remainder > 0)

    def sorted_weights(self) -> np.ndarray:
        """Vertex weights aligned with losses sorted from most to least extreme."""
        w = np.zeros(self.n)
        w[: self.n_full] = self.cap
        if self.remainder > 0:
            w[self.n_full] = self.remainder
        return w

    def contains(self, x, tol: float = 1e-10) -> bool:
        x = np.asarray(x, dtype=float)
        return (
            x.shape == (self.n,)
            and bool(np.all(x >= -tol))
            and bool(np.all(x <= self.cap + tol))
            and abs(x.sum() - 1.0) <= tol
        )

    def uniform(self) -> np.ndarray:
        return np.full(self.n, 1.0 / self.n)


@dataclass(frozen=True)
class AmbiguityPair:
    A: CappedSimplex
    B: CappedSimplex
    phi: float = 0.0

    def __post_init__(self):
        if self.A.n != self.B.n:
            raise ValueError("A and B must live in the same dimension")
        if not 0.0 <= self.phi < 1.0:
            raise ValueError(f"phi must lie in [0, 1), got {self.phi}")

    @property
    def n(self) -> int:
        return self.A.n

    @classmethod
    def symmetric(cls, n: int, alpha: float, phi: float = 0.0) -> "AmbiguityPair":
        s = CappedSimplex(n, alpha)
        return cls(s, s, phi)

    def combine(self, a, b) -> np.ndarray:
        return (np.asarray(a) - self.phi * np.asarray(b)) / (1.0 - self.phi)

    def with_phi(self, phi: float) -> "AmbiguityPair":
        return AmbiguityPair(self.A, self.B, phi)


@dataclass(frozen=True, eq=False)
class DualPoint:
    lam: np.ndarray
    a: np.ndarray
    b: np.ndarray

    @classmethod
    def from_witness(cls, a, b, pair: AmbiguityPair) -> "DualPoint":
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        return cls(pair.combine(a, b), a, b)

    @classmethod
    def uniform(cls, pair: AmbiguityPair) -> "DualPoint":
        return cls.from_witness(pair.A.uniform(), pair.B.uniform(), pair)

    def check(self, pair: AmbiguityPair, tol: float = 1e-10) -> None:
        if abs(self.lam.sum() - 1.0) > tol:
            raise ContractViolation(f"dual point off the unit-sum hyperplane: sum={self.lam.sum()!r}")
        if not (pair.A.contains(self.a, tol) and pair.B.contains(self.b, tol)):
            raise ContractViolation("dual witness outside its capped simplex")
        if np.max(np.abs(self.lam - pair.combine(self.a, self.b))) > tol:
            raise ContractViolation("dual point does not match its witness")


@dataclass(frozen=True)
class SetGeometry:
    l1_norm: float
    skewness: float
    exact: bool


# -- linear oracles -----------------------------------------------------------


def _extreme_weights(v: np.ndarray, S: CappedSimplex, largest: bool) -> np.ndarray:
    order = np.argsort(-v if largest else v, kind="stable")
    w = np.zeros(S.n)
    w[order] = S.sorted_weights()
    return w


def _check_losses(losses, S):
    losses = np.asarray(losses, dtype=float)
    if losses.shape != (S.n,):
        raise ContractViolation(f"expected {S.n} losses, got shape {losses.shape}")
    if np.any(losses < 0):
        raise ContractViolation("losses must be nonnegative")
    return losses


def cvar_max(losses, S: CappedSimplex) -> tuple[float, np.ndarray]:
    """Exact ``max_{a in S} <a, losses>`` and its maximizer (ties: lowest index)."""
    losses = _check_losses(losses, S)
    a = _extreme_weights(losses, S, largest=True)
    return float(a @ losses), a


def cvar_min(losses, S: CappedSimplex) -> tuple[float, np.ndarray]:
    """Exact ``min_{b in S} <b, losses>`` and its minimizer (ties: lowest index)."""
    losses = _check_losses(losses, S)
    b = _extreme_weights(losses, S, largest=False)
    return float(b @ losses), b


def cvar_max_batch(L: np.ndarray, S: CappedSimplex) -> np.ndarray:
    """Column-wise CVaR of an ``(n, m)`` loss matrix."""
    return S.sorted_weights() @ -np.sort(-L, axis=0)


def cvar_min_batch(L: np.ndarray, S: CappedSimplex) -> np.ndarray:
    return S.sorted_weights() @ np.sort(L, axis=0)


def vertices(S: CappedSimplex) -> np.ndarray:
    """All vertices of the capped simplex, one per row."""
    out = []
    k, rem = S.n_full, S.remainder
    for full in itertools.combinations(range(S.n), k):
        rest = [i for i in range(S.n) if i not in full] if rem > 0 else [None]
        for j in rest:
            v = np.zeros(S.n)
            v[list(full)] = S.cap
            if j is not None:
                v[j] = rem
            out.append(v)
    return np.array(out)


# -- projections ----------------------------------------------------------------


def project_capped_simplex(point, S: CappedSimplex) -> np.ndarray:
    """Euclidean projection onto the capped simplex.

    The projection is ``clip(v - t, 0, c)`` for the shift ``t`` at which the
    coordinates sum to one.  The sum is piecewise linear in ``t`` with kinks
    at ``v_i`` and ``v_i - c``; the kink interval containing the root fixes
    which coordinates are clipped, and the free ones are then set in closed
    form from their deviations about their mean.  Classification compares
    kinks rather than subtracting shifts, so inputs with a huge spread stay
    exact.
    """
    v = np.asarray(point, dtype=float)
    if v.shape != (S.n,):
        raise ContractViolation(f"expected a point of length {S.n}, got {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ContractViolation("cannot project a non-finite point")
    c = S.cap
    if S.n_full == S.n:
        return np.full(S.n, c)
    v = v - v.max()  # shift invariance; keeps the coordinates that matter near zero
    lower = v - c
    kinks = np.unique(np.concatenate([v, lower]))
    at = kinks[:, None]
    mass = np.where(lower[None, :] >= at, c, np.where(v[None, :] <= at, 0.0, v[None, :] - at)).sum(axis=1)
    # mass is nonincreasing along kinks: n*c >= 1 at the first, 0 at the last
    k = int(np.flatnonzero(mass >= 1.0)[-1])
    if mass[k] == 1.0 or k + 1 == kinks.size:
        left = right = kinks[k]
    else:
        left, right = kinks[k], kinks[k + 1]
    up = lower >= right
    free = (v > left) & ~up if left != right else (v > left) & (lower < left)
    x = np.where(up, c, 0.0)
    if free.any():
        vf = v[free]
        x[free] = np.clip(vf - vf.mean() + (1.0 - c * np.count_nonzero(up)) / vf.size, 0.0, c)
    if abs(x.sum() - 1.0) > 1e-12:
        # v - c rounded to v: the spread dwarfs the cap, so the projection is a sorted vertex
        x = _extreme_weights(v, S, largest=True)
    return x


def prox_objective(s, lam, lambda_prev, sigma) -> float:
    """``-<s, lam> + ||lam - lambda_prev||^2 / (2 sigma)``."""
    d = np.asarray(lam) - np.asarray(lambda_prev)
    return float(-np.dot(s, lam) + d @ d / (2.0 * sigma))


def dual_prox(
    s,
    lambda_prev: DualPoint,
    sigma: float,
    pair: AmbiguityPair,
    tol: float = 1e-10,
    max_sweeps: int = 10_000,
) -> DualPoint:
    """Prox step of the dual player over the integrated set.

    Minimizes ``-<s, lam> + ||lam - lambda_prev||^2 / (2 sigma)`` over
    ``lam = (a - phi b)/(1 - phi)``, ``(a, b) in A x B``.  This is the
    projection of ``lambda_prev + sigma s`` onto the integrated set; it is
    computed by alternating exact projections in ``a`` and ``b`` (warm-started
    from the witness of ``lambda_prev``) until a Frank-Wolfe certificate bounds
    the prox-objective suboptimality by ``tol``.
    """
    s = np.asarray(s, dtype=float)
    n = pair.n
    if s.shape != (n,):
        raise ContractViolation(f"expected s of length {n}, got {s.shape}")
    if sigma <= 0:
        raise ContractViolation("sigma must be positive")
    phi = pair.phi
    w = 1.0 - phi
    target = w * (lambda_prev.lam + sigma * s)
    if phi == 0.0:
        a = project_capped_simplex(target, pair.A)
        return DualPoint(a, a, lambda_prev.b)

    # q(a, b) = ||a - phi b - target||^2 / 2 equals sigma w^2 (prox objective) + const.
    scale = sigma * w * w
    a, b = lambda_prev.a, lambda_prev.b
    q_prev = math.inf
    for _ in range(max_sweeps):
        a = project_capped_simplex(phi * b + target, pair.A)
        b = project_capped_simplex((a - target) / phi, pair.B)
        r = a - phi * b - target
        q = 0.5 * float(r @ r)
        gap = float(r @ a - r @ _extreme_weights(r, pair.A, largest=False))
        gap += phi * float(-(r @ b) + r @ _extreme_weights(r, pair.B, largest=True))
        if min(gap, q) <= tol * scale or q_prev - q <= 1e-16 * scale:
            return DualPoint.from_witness(a, b, pair)
        q_prev = q
    raise NumericalFailure(
        f"dual prox did not converge in {max_sweeps} sweeps", last=DualPoint.from_witness(a, b, pair)
    )


# -- set functionals -----------------------------------------------------------------


def _disjoint_supports(pair: AmbiguityPair) -> bool:
    return pair.A.support + pair.B.support <= pair.n


def _vertex_pairs(pair: AmbiguityPair, chunk: int = 256):
    if pair.n > ENUMERATION_MAX_N:
        raise UnsupportedGeometry(
            f"vertex enumeration is limited to n <= {ENUMERATION_MAX_N} (got n={pair.n}); "
            "use a smaller n or alpha values whose vertex supports can be disjoint"
        )
    va, vb = vertices(pair.A), vertices(pair.B)
    for i in range(0, len(va), chunk):
        yield (va[i : i + chunk, None, :] - pair.phi * vb[None, :, :]).reshape(-1, pair.n) / (1.0 - pair.phi)


def _disjoint_extreme_point(pair: AmbiguityPair) -> np.ndarray:
    a = np.zeros(pair.n)
    b = np.zeros(pair.n)
    a[: pair.A.support] = pair.A.sorted_weights()[: pair.A.support]
    b[pair.A.support : pair.A.support + pair.B.support] = pair.B.sorted_weights()[: pair.B.support]
    return pair.combine(a, b)


def integrated_l1_norm(pair: AmbiguityPair) -> float:
    """``max ||lam||_1`` over the integrated set."""
    if pair.phi == 0.0:
        return 1.0
    if _disjoint_supports(pair):
        return (1.0 + pair.phi) / (1.0 - pair.phi)
    return max(float(np.abs(lam).sum(axis=1).max()) for lam in _vertex_pairs(pair))


def skewness(lam) -> float:
    """``n * sum (lam_i - 1/n)^2 + 1``, summed with fsum so it is order independent."""
    lam = np.asarray(lam, dtype=float)
    n = lam.shape[0]
    return n * math.fsum(((lam - 1.0 / n) ** 2).tolist()) + 1.0


def skewness_exact(pair: AmbiguityPair, method: str = "auto") -> float:
    """Maximum skewness over the integrated set.

    ``method="construction"`` uses the disjoint-support extreme point (valid
    when both vertex supports fit side by side); ``"enumerate"`` maximizes over
    all vertex pairs (n <= 12); ``"auto"`` prefers the construction.
    """
    if method not in ("auto", "construction", "enumerate"):
        raise ValueError(f"unknown method {method!r}")
    if method != "enumerate" and _disjoint_supports(pair):
        return skewness(_disjoint_extreme_point(pair))
    if method == "construction":
        raise UnsupportedGeometry("vertex supports of A and B cannot be disjoint at this n and alpha")
    best_val, best = -math.inf, []
    for lam in _vertex_pairs(pair):
        sq = pair.n * np.sum((lam - 1.0 / pair.n) ** 2, axis=1)
        top = sq.max()
        if top > best_val * (1 + 1e-12):
            best_val, best = top, list(lam[sq >= top * (1 - 1e-12)])
        elif top >= best_val * (1 - 1e-12):
            best += list(lam[sq >= best_val * (1 - 1e-12)])
    return max(skewness(lam) for lam in best)


def skewness_formula(alpha: float, phi: float) -> float:
    """Large-n leading term of the skewness for ``A = B`` with parameter alpha."""
    u = 1.0 / ((1.0 - phi) * alpha)
    return alpha * ((u - 1.0) ** 2 + (phi * u + 1.0) ** 2) + 1.0


def set_geometry(pair: AmbiguityPair) -> SetGeometry:
    exact = _disjoint_supports(pair) or pair.phi == 0.0
    return SetGeometry(integrated_l1_norm(pair), skewness_exact(pair), exact)


def generalization_bound(skewness_value, vc_dim, covering_count, N, n, M, epsilon, delta) -> float:
    """Excess-risk term of the uniform bound for weighted empirical risks.

    Returns ``M eps + sqrt(s / (2Nn)) * (4 sqrt(VC) sqrt(1 + log(Nn/VC))
    + M sqrt(log(cover/delta)))``; a zero VC dimension drops its term.
    """
    total = N * n
    if vc_dim >= total:
        raise ContractViolation(f"VC dimension {vc_dim} must be below N*n = {total}")
    if min(skewness_value, covering_count, N, n, delta) <= 0 or min(vc_dim, M, epsilon) < 0:
        raise ContractViolation("generalization bound inputs must be positive")
    vc_term = 0.0 if vc_dim == 0 else 4.0 * math.sqrt(vc_dim) * math.sqrt(1.0 + math.log(total / vc_dim))
    cover_term = M * math.sqrt(max(math.log(covering_count / delta), 0.0))
    return M * epsilon + math.sqrt(skewness_value / (2.0 * total)) * (vc_term + cover_term)
