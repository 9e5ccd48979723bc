import numpy as np
import pytest

from relfair.losses import ClientObjective, DataShard


def scalar_quadratic(center=0.0, curvature=2.0, client_id=0):
    """f(theta) = (curvature / 2) * (theta - center)^2 as a one-sample regression."""
    x = np.sqrt(curvature / 2.0)
    return ClientObjective("quadratic-regression", DataShard(client_id, np.array([[x]]), np.array([x * center])))


def regression_objs(n_clients=3, d=2, n_samples=30, seed=0, reg=0.0, spread=2.0, intercept=False):
    rng = np.random.default_rng(seed)
    objs = []
    for i in range(n_clients):
        x = rng.normal(size=(n_samples, d))
        y = x @ (spread * rng.normal(size=d)) + 0.3 * rng.normal(size=n_samples)
        objs.append(ClientObjective("quadratic-regression", DataShard(i, x, y), regularizer=reg, fit_intercept=intercept))
    return objs


def classification_objs(kind="multinomial-logistic", n_clients=3, p=3, k=3, n_samples=25, seed=0, reg=0.01):
    rng = np.random.default_rng(seed)
    objs = []
    for i in range(n_clients):
        x = rng.normal(size=(n_samples, p))
        y = rng.integers(0, k, size=n_samples)
        objs.append(ClientObjective(kind, DataShard(i, x, y), regularizer=reg, n_classes=k, hidden=4))
    return objs


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance criteria register their verdicts here; the summary hook prints them
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[number] = (bool(ok), detail)
    print(f"criterion {number}: {'PASS' if ok else 'FAIL'} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
