import math
import warnings

import numpy as np
import pytest

from conftest import classification_objs, regression_objs, scalar_quadratic
from relfair.ambiguity import AmbiguityPair, CappedSimplex, DualPoint, integrated_l1_norm
from relfair.losses import NoiseModel, smoothness_constants
from relfair.optimizer import (
    AlgorithmSpec,
    ConfigurationError,
    FixedRates,
    GrowingSchedule,
    RoundState,
    ScheduleParams,
    ThetaDomain,
    afl_baseline,
    local_update,
    run,
    run_round,
    schedule_init,
    schedule_step,
)
from relfair.oracle import ThetaGrid, exact_saddle, grid_minimax
from relfair.rng import RngStreams, stream


def unit_params(**kw):
    base = dict(tau0=0.1, gamma0=1.0, J=5, m_f=1.0, M_f=1.0, lambda_l1=1.0)
    base.update(kw)
    return ScheduleParams(**base)


# -- schedule -------------------------------------------------------------------------------


def test_first_schedule_step_by_hand():
    p = unit_params()
    s0 = schedule_init(p)
    s1 = schedule_step(s0, p)
    assert s1.gamma == pytest.approx(1.025, rel=1e-15)
    assert s1.tau == pytest.approx(0.1 * math.sqrt(1 / 1.025), rel=1e-15)
    assert s1.sigma == pytest.approx(1.025 * 0.1 * math.sqrt(1 / 1.025), rel=1e-15)
    assert s1.varsigma == pytest.approx(s0.sigma / s1.sigma, rel=1e-15)
    assert (round(s1.tau, 6), round(s1.sigma, 6), round(s1.varsigma, 6)) == (0.098773, 0.101242, 0.98773)
    assert s1.eta == pytest.approx(s1.tau / (5 * p.beta_value))


def test_schedule_invariants_over_many_rounds():
    p = unit_params()
    s = schedule_init(p)
    prev = s
    for _ in range(2000):
        s = schedule_step(s, p)
        assert abs(s.tau * s.sigma - 0.01) <= 1e-12 * 0.01
        assert s.sigma >= prev.sigma and s.tau <= prev.tau
        prev = s


def test_default_beta():
    assert unit_params(tau0=0.9, M_f=2.0).beta_value == pytest.approx(3.6)
    assert unit_params().beta_value == 1.0


def test_validation_lists_failed_inequalities():
    p = unit_params(tau0=0.1)
    bad = p.violations()
    assert any("1200" in v for v in bad)
    with pytest.raises(ConfigurationError, match="tau0"):
        p.validate(strict=True)
    with pytest.warns(UserWarning):
        p.validate(strict=False)


def test_admissible_parameters_pass():
    p = unit_params(tau0=1e-4, L_lambda_theta=1.0)
    assert p.violations() == []
    assert p.validate() == []


def test_nonpositive_drift_is_fatal_and_cites_norm_condition():
    p = unit_params(lambda_l1=2.0)
    with pytest.raises(ConfigurationError, match=r"1 \+ 2 m_f/M_f"):
        p.validate(strict=False)


def test_zero_strong_convexity_is_fatal():
    with pytest.raises(ConfigurationError, match="regularizer"):
        unit_params(m_f=0.0).validate(strict=False)


# -- local update and rounds ------------------------------------------------------------------------


def test_local_update_hand_unrolled():
    obj = scalar_quadratic(curvature=1.0)
    du = local_update(obj, np.array([1.0]), np.zeros(1), np.zeros(1), 0.5, 2, NoiseModel(), lambda j: stream(0, 0, 0, j))
    # u1 = 0.5, u2 = 0.25, du = (1 - 0.25) / (0.5 * 2)
    assert du[0] == pytest.approx(0.75, rel=1e-15)


def test_local_update_with_matching_controls_is_local_gd_direction():
    obj = regression_objs(n_clients=1, d=2)[0]
    theta, eta, J = np.array([0.3, -0.4]), 0.05, 4
    c = np.array([10.0, -3.0])
    du = local_update(obj, theta, c, c, eta, J, NoiseModel(), lambda j: stream(0, 0, 0, j))
    u = theta.copy()
    for _ in range(J):
        u = u - eta * obj.gradient(u)
    np.testing.assert_allclose(du, (theta - u) / (eta * J), rtol=1e-13)


def test_local_update_zero_gradient():
    obj = scalar_quadratic(center=2.0)
    du = local_update(obj, np.array([2.0]), np.zeros(1), np.zeros(1), 0.1, 3, NoiseModel(), lambda j: stream(0, 0, 0, j))
    assert du[0] == 0.0


def test_single_client_round_by_hand():
    obj = scalar_quadratic(curvature=1.0)
    pair = AmbiguityPair.symmetric(1, 1.0)
    spec = AlgorithmSpec("scaff-pd-ia", pair, 1, J=2).effective()
    sched = FixedRates(eta=0.5, tau=0.4, sigma=1.0)
    state = RoundState(np.array([1.0]), DualPoint.uniform(pair), np.array([0.5]), sched.init())
    out = run_round([obj], state, spec, sched, RngStreams(0))
    # local GD gives du = 0.75; theta = 1 - 0.4 * 0.75
    assert out.theta[0] == pytest.approx(0.7, rel=1e-15)
    assert out.prev_losses[0] == pytest.approx(0.5)


def test_zero_rounds_returns_initialization():
    objs = regression_objs()
    pair = AmbiguityPair.symmetric(3, 0.5, 0.2)
    theta0 = np.array([0.3, -0.7])
    res = run(objs, AlgorithmSpec("scaff-pd-ia", pair, 0), FixedRates(0.1, 0.1, 0.1), theta0=theta0)
    np.testing.assert_array_equal(res.theta, theta0)
    assert res.records == []


def test_records_have_one_entry_per_round_and_feasible_duals():
    objs = regression_objs(n_clients=4)
    pair = AmbiguityPair.symmetric(4, 0.5, 0.3)
    res = run(objs, AlgorithmSpec("scaff-pd-ia", pair, 12, noise=NoiseModel(0.1)), FixedRates(0.05, 0.5, 0.3), seed=2,
              theta_star=np.zeros(2))
    assert len(res.records) == 12
    for rec in res.records:
        assert abs(rec.lam.sum() - 1.0) <= 1e-12
        assert rec.dist2 is not None
    res.dual.check(pair, tol=1e-9)


def _trajectory(res):
    return np.array([np.concatenate([r.losses, r.lam]) for r in res.records])


def test_phi_zero_matches_scaff_pd_bit_for_bit():
    objs = regression_objs(n_clients=4)
    pair = AmbiguityPair.symmetric(4, 0.5, 0.0)
    noise = NoiseModel(0.2)
    a = run(objs, AlgorithmSpec("scaff-pd-ia", pair, 15, noise=noise), FixedRates(0.05, 0.5, 0.5), seed=3)
    b = run(objs, AlgorithmSpec("scaff-pd", pair.with_phi(0.4), 15, noise=noise), FixedRates(0.05, 0.5, 0.5), seed=3)
    np.testing.assert_array_equal(a.theta, b.theta)
    np.testing.assert_array_equal(_trajectory(a), _trajectory(b))


def test_frozen_uniform_dual_matches_scaffold_bit_for_bit():
    objs = regression_objs(n_clients=4)
    pair = AmbiguityPair.symmetric(4, 0.5, 0.3)
    noise = NoiseModel(0.2)
    frozen = AlgorithmSpec("scaff-pd-ia", pair, 15, noise=noise, freeze_dual=True)
    u = np.full(4, 0.25)
    a = run(objs, frozen, FixedRates(0.05, 0.5, 0.5), seed=4, dual0=DualPoint(u, u, u))
    b = run(objs, AlgorithmSpec("scaffold", pair, 15, noise=noise), FixedRates(0.05, 0.5, 0.5), seed=4)
    np.testing.assert_array_equal(a.theta, b.theta)
    np.testing.assert_array_equal(_trajectory(a), _trajectory(b))


def test_fedavg_is_averaged_local_sgd():
    objs = regression_objs(n_clients=3)
    pair = AmbiguityPair.symmetric(3, 0.5)
    eta, tau, J = 0.05, 0.8, 3
    res = run(objs, AlgorithmSpec("fedavg", pair, 1, J=J), FixedRates(eta, tau, 1.0))
    theta = np.zeros(2)
    deltas = []
    for o in objs:
        u = theta.copy()
        for _ in range(J):
            u = u - eta * o.gradient(u)
        deltas.append((theta - u) / (eta * J))
    np.testing.assert_allclose(res.theta, theta - tau * np.mean(deltas, axis=0), rtol=1e-13)
    np.testing.assert_allclose(res.records[0].lam, np.full(3, 1 / 3))


def test_serial_and_threaded_runs_are_identical():
    objs = classification_objs(n_clients=5)
    pair = AmbiguityPair.symmetric(5, 0.4, 0.2)
    spec = AlgorithmSpec("scaff-pd-ia", pair, 8, noise=NoiseModel(0.3, "minibatch", 4))
    a = run(objs, spec, FixedRates(0.05, 0.5, 0.2), seed=9, workers=1)
    b = run(objs, spec, FixedRates(0.05, 0.5, 0.2), seed=9, workers=4)
    np.testing.assert_array_equal(a.theta, b.theta)
    np.testing.assert_array_equal(_trajectory(a), _trajectory(b))


def test_box_projection_keeps_iterates_inside():
    objs = regression_objs(spread=5.0)
    pair = AmbiguityPair.symmetric(3, 0.5)
    dom = ThetaDomain("box", lo=-0.1, hi=0.1)
    res = run(objs, AlgorithmSpec("scaff-pd-ia", pair, 5, theta_domain=dom), FixedRates(0.05, 1.0, 0.2))
    assert np.all(np.abs(res.theta) <= 0.1)
    ball = ThetaDomain("ball", radius=0.05)
    np.testing.assert_allclose(np.linalg.norm(ball.project(np.array([3.0, 4.0]))), 0.05)


def test_norm_condition_warning():
    objs = [scalar_quadratic(curvature=1.0), scalar_quadratic(1.0, curvature=4.0)]
    pair = AmbiguityPair.symmetric(2, 0.5, 0.6)  # ||Lambda||_1 = 4 > 1 + 2 * 1/4
    with pytest.warns(UserWarning, match="not guaranteed"):
        run(objs, AlgorithmSpec("scaff-pd-ia", pair, 1), FixedRates(0.01, 0.01, 0.01), constants=smoothness_constants(objs))


def test_invalid_variant_and_steps():
    pair = AmbiguityPair.symmetric(2, 0.5)
    with pytest.raises(ConfigurationError):
        AlgorithmSpec("drfa", pair, 1)
    with pytest.raises(ConfigurationError):
        AlgorithmSpec("fedavg", pair, 1, J=1)


# -- convergence -----------------------------------------------------------------------------------------


def quadratic_suite(phi=0.05):
    objs = regression_objs(n_clients=5, d=3, n_samples=400, seed=1)
    pair = AmbiguityPair.symmetric(5, 0.4, phi)
    return objs, pair


def test_schedule_run_converges_to_the_exact_saddle():
    objs, pair = quadratic_suite()
    c = smoothness_constants(objs)
    p = ScheduleParams.from_constants(1.0, 0.002, 5, c, integrated_l1_norm(pair))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        sched = GrowingSchedule(p, strict=False)
    star = exact_saddle(objs, pair)
    res = run(objs, AlgorithmSpec("scaff-pd-ia", pair, 300, J=5), sched, theta_star=star.theta_star)
    d = [r.dist2 for r in res.records]
    assert d[-1] < 1e-8
    assert np.median(d[200:]) < np.median(d[50:100])


def test_afl_identical_clients_reach_common_minimizer():
    objs = [scalar_quadratic(1.5, client_id=i) for i in range(3)]
    res = afl_baseline(objs, CappedSimplex(3, 0.5), 0.3, 0.1, 200)
    assert res.theta[0] == pytest.approx(1.5, abs=1e-10)


def test_afl_singleton_set_is_gradient_descent_on_the_average():
    objs = regression_objs(n_clients=3)
    res = afl_baseline(objs, CappedSimplex(3, 1.0), 0.1, 5.0, 3)
    theta = np.zeros(2)
    for _ in range(3):
        theta = theta - 0.1 * np.mean([o.gradient(theta) for o in objs], axis=0)
    np.testing.assert_allclose(res.theta, theta, rtol=1e-13)


def test_afl_asymmetric_pair_matches_grid_saddle_value():
    objs = [scalar_quadratic(1.0, curvature=2.0), scalar_quadratic(-2.0, curvature=6.0, client_id=1)]
    A = CappedSimplex(2, 0.5)
    res = afl_baseline(objs, A, 0.05, 0.05, 20000)
    sol = grid_minimax(objs, ThetaGrid(((-2.0, 1.0, 1e-5),)), AmbiguityPair(A, A, 0.0))
    value = max(o.value(res.theta) for o in objs)
    assert value == pytest.approx(sol.value, abs=1e-4)


def test_afl_requires_fixed_rates():
    objs, pair = regression_objs(), AmbiguityPair.symmetric(3, 0.5)
    p = unit_params()
    with pytest.raises(ConfigurationError):
        run(objs, AlgorithmSpec("afl-pd", pair, 2), schedule_obj(p))


def schedule_obj(p):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return GrowingSchedule(p, strict=False)
