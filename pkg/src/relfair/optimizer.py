"""Primal-dual training with controlled averaging over an integrated ambiguity set.

Each round the server collects exact client losses and one stochastic gradient
per client, takes an extrapolated prox step on the dual weights, broadcasts the
dual-weighted control variate, and aggregates the clients' corrected local SGD
displacements into one primal step.  Variants that freeze the dual at uniform
or drop the control variates reuse the same loop.
"""

from __future__ import annotations

import math
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .ambiguity import AmbiguityPair, CappedSimplex, DualPoint, dual_prox, integrated_l1_norm, project_capped_simplex
from .fairness import FairnessDomainError, gini, relative_unfairness
from .losses import ClientObjective, NoiseModel, SmoothnessConstants, stochastic_gradient
from .rng import RngStreams

VARIANTS = ("scaff-pd-ia", "scaff-pd", "scaffold", "fedavg", "afl-pd")


class ConfigurationError(ValueError):
    pass


# -- schedule ---------------------------------------------------------------------


@dataclass(frozen=True)
class ScheduleParams:
    tau0: float
    gamma0: float
    J: int
    m_f: float
    M_f: float
    lambda_l1: float
    beta: float | None = None
    c_alpha: float = 0.5
    L_lambda_theta: float | None = None

    @classmethod
    def from_constants(cls, tau0, gamma0, J, constants: SmoothnessConstants, lambda_l1, **kw):
        return cls(tau0, gamma0, J, constants.m_f, constants.M_f, lambda_l1,
                   L_lambda_theta=constants.L_lambda_theta, **kw)

    @property
    def beta_value(self) -> float:
        return self.beta if self.beta is not None else max(1.0, 2.0 * self.tau0 * self.M_f)

    @property
    def drift(self) -> float:
        return self.m_f / 4.0 - self.M_f * (self.lambda_l1 - 1.0) / 2.0

    def violations(self) -> list[str]:
        """Every failed admissibility inequality, as readable strings."""
        out = []
        if self.m_f <= 0:
            out.append("m_f = 0: the schedule needs strongly convex losses; use a regularizer > 0")
            return out
        if self.tau0 <= 0 or self.gamma0 <= 0:
            out.append("tau0 and gamma0 must be positive")
        if self.J < 2:
            out.append(f"J = {self.J} < 2")
        if not 0.0 < self.c_alpha < 1.0:
            out.append(f"c_alpha = {self.c_alpha} outside (0, 1)")
        if self.beta_value < max(1.0, 2.0 * self.tau0 * self.M_f):
            out.append(f"beta = {self.beta_value} < max(1, 2 tau0 M_f)")
        if self.drift <= 0:
            out.append(
                f"drift m_f/4 - M_f(||Lambda||_1 - 1)/2 = {self.drift:.4g} <= 0: "
                f"||Lambda||_1 = {self.lambda_l1:.4g} is too large for m_f/M_f = {self.m_f / self.M_f:.4g}"
            )
            return out
        bound = min(1.0 / (1200.0 * self.M_f * self.lambda_l1), 18.0 * (1.0 + math.sqrt(3.0)) / (4.0 * self.drift))
        if self.tau0 > bound:
            out.append(f"tau0 = {self.tau0:.4g} exceeds min(1/(1200 M_f ||Lambda||_1), 18(1+sqrt3)/(m_f - 2M_f(||Lambda||_1-1))) = {bound:.4g}")
        if self.L_lambda_theta is None:
            out.append("L_lambda_theta unknown (unbounded domain): cannot check 4 L^2 tau0^2 gamma0 / c_alpha + 27 M_f tau0 <= 1")
        else:
            lhs = 4.0 * self.L_lambda_theta**2 * self.tau0**2 * self.gamma0 / self.c_alpha + 27.0 * self.M_f * self.tau0
            if lhs > 1.0:
                out.append(f"4 L^2 tau0^2 gamma0 / c_alpha + 27 M_f tau0 = {lhs:.4g} > 1")
        return out

    def validate(self, strict: bool = True) -> list[str]:
        """Raise on violations when strict; otherwise warn and return them.

        Nonpositive drift and a zero m_f are always fatal: the recurrence would
        not grow gamma at all.
        """
        bad = self.violations()
        fatal = [v for v in bad if v.startswith(("m_f = 0", "drift", "tau0 and gamma0", "J ="))]
        if fatal or (strict and bad):
            hint = ""
            if any(v.startswith("drift") for v in bad):
                hint = " (convergence needs ||Lambda_phi(A,B)||_1 < 1 + 2 m_f/M_f and a positive drift)"
            raise ConfigurationError("invalid schedule parameters: " + "; ".join(bad) + hint)
        for v in bad:
            warnings.warn(f"schedule outside the admissible region: {v}", stacklevel=2)
        return bad


@dataclass(frozen=True)
class ScheduleState:
    r: int
    tau: float
    sigma: float
    gamma: float
    varsigma: float
    eta: float


def schedule_init(params: ScheduleParams) -> ScheduleState:
    tau, gamma = params.tau0, params.gamma0
    return ScheduleState(0, tau, gamma * tau, gamma, 1.0, tau / (params.J * params.beta_value))


def schedule_step(state: ScheduleState, params: ScheduleParams) -> ScheduleState:
    gamma = state.gamma * (1.0 + params.drift * state.tau)
    tau = state.tau * math.sqrt(state.gamma / gamma)
    sigma = gamma * tau
    return ScheduleState(state.r + 1, tau, sigma, gamma, state.sigma / sigma, tau / (params.J * params.beta_value))


class GrowingSchedule:
    """The coupled (tau, sigma, gamma, varsigma, eta) recurrence."""

    label = "schedule"

    def __init__(self, params: ScheduleParams, strict: bool = True):
        self.params = params
        self.violations = params.validate(strict=strict)

    def init(self) -> ScheduleState:
        return schedule_init(self.params)

    def step(self, state: ScheduleState) -> ScheduleState:
        return schedule_step(state, self.params)


class FixedRates:
    """Constant (eta, tau, sigma); varsigma is then identically 1."""

    label = "fixed"

    def __init__(self, eta: float, tau: float, sigma: float):
        if min(eta, tau, sigma) <= 0:
            raise ConfigurationError("fixed learning rates must be positive")
        self.eta, self.tau, self.sigma = eta, tau, sigma
        self.violations: list[str] = []

    def init(self) -> ScheduleState:
        return ScheduleState(0, self.tau, self.sigma, float("nan"), 1.0, self.eta)

    def step(self, state: ScheduleState) -> ScheduleState:
        return replace(state, r=state.r + 1)


# -- algorithm pieces -----------------------------------------------------------------------


@dataclass(frozen=True)
class ThetaDomain:
    kind: str = "unconstrained"
    radius: float | None = None
    lo: float | None = None
    hi: float | None = None

    def __post_init__(self):
        if self.kind not in ("unconstrained", "ball", "box"):
            raise ConfigurationError(f"unknown theta domain {self.kind!r}")
        if self.kind == "ball" and not (self.radius and self.radius > 0):
            raise ConfigurationError("ball domain needs a positive radius")
        if self.kind == "box" and not (self.lo is not None and self.hi is not None and self.lo < self.hi):
            raise ConfigurationError("box domain needs lo < hi")

    def project(self, theta: np.ndarray) -> np.ndarray:
        if self.kind == "ball":
            norm = float(np.linalg.norm(theta))
            return theta if norm <= self.radius else theta * (self.radius / norm)
        if self.kind == "box":
            return np.clip(theta, self.lo, self.hi)
        return theta

    @property
    def diameter(self) -> float | None:
        if self.kind == "ball":
            return 2.0 * self.radius
        return None


@dataclass(frozen=True)
class AlgorithmSpec:
    variant: str
    pair: AmbiguityPair
    rounds: int
    J: int = 5
    theta_domain: ThetaDomain = field(default_factory=ThetaDomain)
    noise: NoiseModel = field(default_factory=NoiseModel)
    freeze_dual: bool = False
    control_variates: bool = True

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.J < 2 or self.rounds < 0:
            raise ConfigurationError("need J >= 2 local steps and rounds >= 0")

    def effective(self) -> "AlgorithmSpec":
        """Resolve a named variant into the switches of the shared loop."""
        if self.variant == "scaff-pd":
            return replace(self, pair=self.pair.with_phi(0.0))
        if self.variant == "scaffold":
            return replace(self, freeze_dual=True)
        if self.variant == "fedavg":
            return replace(self, freeze_dual=True, control_variates=False)
        return self


@dataclass(eq=False)
class RoundState:
    theta: np.ndarray
    dual: DualPoint
    prev_losses: np.ndarray
    schedule: ScheduleState


@dataclass(eq=False)
class RoundRecord:
    r: int
    losses: np.ndarray
    lam: np.ndarray
    dist2: float | None
    r_ab: float | None
    gini: float | None


@dataclass(eq=False)
class RunResult:
    theta: np.ndarray
    dual: DualPoint
    records: list[RoundRecord]
    seed: int
    wall_time: float
    schedule_label: str = ""


def local_update(obj: ClientObjective, theta, c_i, c, eta: float, J: int, noise: NoiseModel, stream_at: Callable[[int], np.random.Generator]):
    """J corrected SGD steps from ``theta``; returns the averaged displacement.

    ``stream_at(j)`` gives the generator for local step ``j`` (1-based).
    """
    u = np.array(theta, dtype=float)
    correction = np.asarray(c) - np.asarray(c_i)
    for j in range(1, J + 1):
        u = u - eta * (stochastic_gradient(obj, u, noise, stream_at(j)) + correction)
    return (np.asarray(theta) - u) / (eta * J)


class _ClientPool:
    def __init__(self, workers: int):
        self.workers = max(1, int(workers))
        self._executor = ThreadPoolExecutor(self.workers) if self.workers > 1 else None

    def map(self, fn, items):
        if self._executor is None:
            return [fn(x) for x in items]
        return list(self._executor.map(fn, items))

    def close(self):
        if self._executor is not None:
            self._executor.shutdown()


def run_round(objs, state: RoundState, spec: AlgorithmSpec, schedule, streams: RngStreams, pool=None) -> RoundState:
    """One communication round; ``spec`` must already be resolved by ``effective()``."""
    pool = pool or _ClientPool(1)
    n = len(objs)
    r = state.schedule.r
    hp = state.schedule
    theta = state.theta
    pair = spec.pair

    def client_report(i):
        obj = objs[i]
        ci = stochastic_gradient(obj, theta, spec.noise, streams(i, r, 0)) if spec.control_variates else np.zeros_like(theta)
        return obj.value(theta), ci

    reports = pool.map(client_report, range(n))
    L = np.array([rep[0] for rep in reports])
    c_i = [rep[1] for rep in reports]

    if spec.freeze_dual:
        dual = state.dual
    else:
        s = (1.0 + hp.varsigma) * L - hp.varsigma * state.prev_losses
        dual = dual_prox(s, state.dual, hp.sigma, pair)
    lam = dual.lam

    c = np.zeros_like(theta)
    for i in range(n):
        c = c + lam[i] * c_i[i]

    def client_update(i):
        return local_update(objs[i], theta, c_i[i], c, hp.eta, spec.J, spec.noise, lambda j: streams(i, r, j))

    deltas = pool.map(client_update, range(n))
    agg = np.zeros_like(theta)
    for i in range(n):
        agg = agg + lam[i] * deltas[i]
    new_theta = spec.theta_domain.project(theta - hp.tau * agg)
    return RoundState(new_theta, dual, L, schedule.step(state.schedule))


def _record(r, losses, lam, theta, theta_star, pair) -> RoundRecord:
    dist2 = None if theta_star is None else float(np.sum((theta - theta_star) ** 2))
    try:
        r_ab, g = relative_unfairness(losses, pair), gini(losses)
    except (FairnessDomainError, ValueError):
        r_ab, g = None, None
    return RoundRecord(r, losses, lam, dist2, r_ab, g)


def check_norm_condition(pair: AmbiguityPair, constants: SmoothnessConstants | None) -> bool:
    """Warn unless ``||Lambda||_1 < 1 + 2 m_f / M_f``."""
    if constants is None or pair.phi == 0.0:
        return True
    l1 = integrated_l1_norm(pair)
    ok = l1 < 1.0 + 2.0 * constants.m_f / constants.M_f
    if not ok:
        warnings.warn(
            f"||Lambda_phi(A,B)||_1 = {l1:.4g} is not below 1 + 2 m_f/M_f = {1 + 2 * constants.m_f / constants.M_f:.4g}; "
            "convergence is not guaranteed",
            stacklevel=3,
        )
    return ok


def run(
    objs: Sequence[ClientObjective],
    spec: AlgorithmSpec,
    schedule,
    seed: int = 0,
    theta0=None,
    dual0: DualPoint | None = None,
    theta_star=None,
    constants: SmoothnessConstants | None = None,
    workers: int = 1,
) -> RunResult:
    """R rounds of the chosen variant.

    The record of round r holds the losses at ``theta^r``, the dual weights
    used in that round, and the squared distance of the *updated* iterate to
    ``theta_star``.  Results do not depend on ``workers``.
    """
    t0 = time.perf_counter()
    if spec.variant == "afl-pd":
        if not isinstance(schedule, FixedRates):
            raise ConfigurationError("afl-pd takes fixed rates (eta for the primal, sigma for the dual)")
        res = afl_baseline(objs, spec.pair.A, schedule.eta, schedule.sigma, spec.rounds, theta0, theta_star, spec.theta_domain)
        res.seed = seed
        return res
    eff = spec.effective()
    check_norm_condition(eff.pair, constants)
    dim = objs[0].dim
    theta = np.zeros(dim) if theta0 is None else np.array(theta0, dtype=float)
    theta_star = None if theta_star is None else np.asarray(theta_star, dtype=float)
    dual = dual0 if dual0 is not None else DualPoint.uniform(eff.pair)
    if spec.variant == "scaff-pd" and dual0 is not None:
        dual = DualPoint(dual.a, dual.a, dual.b)
    if eff.freeze_dual and dual0 is None:
        u = np.full(len(objs), 1.0 / len(objs))
        dual = DualPoint(u, u, u)
    streams = RngStreams(seed)
    state = RoundState(theta, dual, np.array([o.value(theta) for o in objs]), schedule.init())
    state.schedule = schedule.step(state.schedule)
    records = []
    pool = _ClientPool(workers)
    try:
        for _ in range(spec.rounds):
            r = state.schedule.r
            state = run_round(objs, state, eff, schedule, streams, pool)
            records.append(_record(r, state.prev_losses, state.dual.lam, state.theta, theta_star, eff.pair))
    finally:
        pool.close()
    return RunResult(state.theta, state.dual, records, seed, time.perf_counter() - t0, schedule.label)


def afl_baseline(
    objs: Sequence[ClientObjective],
    A: CappedSimplex,
    eta: float,
    sigma: float,
    rounds: int,
    theta0=None,
    theta_star=None,
    theta_domain: ThetaDomain | None = None,
) -> RunResult:
    """Full-gradient projected descent-ascent over ``Theta x A``."""
    t0 = time.perf_counter()
    theta_domain = theta_domain or ThetaDomain()
    n = len(objs)
    theta = np.zeros(objs[0].dim) if theta0 is None else np.array(theta0, dtype=float)
    a = A.uniform()
    pair = AmbiguityPair(A, A, 0.0)
    records = []
    for r in range(1, rounds + 1):
        L = np.array([o.value(theta) for o in objs])
        grad = np.zeros_like(theta)
        for i in range(n):
            grad = grad + a[i] * objs[i].gradient(theta)
        theta = theta_domain.project(theta - eta * grad)
        a = project_capped_simplex(a + sigma * L, A)
        records.append(_record(r, L, a, theta, theta_star, pair))
    return RunResult(theta, DualPoint(a, a, a), records, 0, time.perf_counter() - t0, "fixed")
