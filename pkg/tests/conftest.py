import numpy as np
import pytest

from curemi.data import CovariateSpec, Kind, ModelSpec, Placement, SurvivalDataset


def make_cure_data(n=300, seed=0, alpha=(0.5, -0.8, 0.6), beta=(0.4, -0.3), w_missing=0.0,
                   w_kind=Kind.CONTINUOUS):
    """Small cure-model dataset with W in both parts, X incidence, Z latency."""
    g = np.random.default_rng(seed)
    W = g.normal(0.5, 1.0, n) if w_kind is Kind.CONTINUOUS else (g.random(n) < 0.5) * 1.0
    X = (g.random(n) < 0.5) * 1.0
    Z = (g.random(n) < 0.5) * 1.0
    eta = alpha[0] + alpha[1] * W + alpha[2] * X
    G = g.random(n) < 1 / (1 + np.exp(-eta))
    lp = beta[0] * W + beta[1] * Z
    T = (-np.log(g.random(n)) / (0.3 * np.exp(lp))) ** (1 / 1.3)
    T = np.where(G & (T < 7), T, 100.0)
    C = np.minimum(g.exponential(8.0, n), 10.0)
    y = np.minimum(T, C)
    delta = (T < C).astype(int)
    cov = np.column_stack([W, X, Z])
    mask = np.zeros_like(cov, dtype=bool)
    if w_missing:
        mask[:, 0] = g.random(n) < w_missing
    schema = (CovariateSpec("W", w_kind, Placement.BOTH),
              CovariateSpec("X", Kind.BINARY, Placement.INCIDENCE),
              CovariateSpec("Z", Kind.BINARY, Placement.LATENCY))
    return SurvivalDataset(y, delta, cov, schema, mask)


@pytest.fixture
def cure_data():
    return make_cure_data()


@pytest.fixture
def model_spec():
    return ModelSpec(("W", "X"), ("W", "Z"))


ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def acceptance_log(request):
    """Collects one result line per acceptance criterion for the terminal summary."""
    return request.config.stash.setdefault(ACCEPTANCE_KEY, [])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
