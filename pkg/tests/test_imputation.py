import math

import numpy as np
import pytest
from scipy.special import expit
from scipy.stats import kstest

from conftest import make_cure_data
from curemi import rng as rngmod
from curemi.cure import fit_cure_em
from curemi.data import CovariateSpec, Kind, ModelSpec, Placement, SurvivalDataset, plateau_mask
from curemi.errors import ZeroAcceptance
from curemi.glm import StepFunction
from curemi.imputation import (ImputationConfig, ImputationState, _independent_columns, _mvn,
                               approximate_predictors, conditional_predictors,
                               cure_status_logit, draw_model_params, exact_binary_logit,
                               exact_log_density, impute_G, imputation_order,
                               metropolis_hastings, run_chained_equations)
from curemi.simulation import generate_replicate, get_scenario

SPEC = ModelSpec(("W", "X"), ("W", "Z"))
PLACEMENTS = (Placement.BOTH, Placement.INCIDENCE, Placement.LATENCY)


def complete_data_loglik(w, placement, G, delta, H, h, eta_rest, alpha_j, lp_rest, beta_l, mu):
    """log f(W=w) + complete-data log-likelihood of one subject, term by term."""
    p_w = 1 / (1 + math.exp(-mu))
    out = math.log(p_w if w == 1 else 1 - p_w)
    eta = eta_rest + (alpha_j * w if placement in (Placement.INCIDENCE, Placement.BOTH) else 0)
    lp = lp_rest + (beta_l * w if placement in (Placement.LATENCY, Placement.BOTH) else 0)
    pi = 1 / (1 + math.exp(-eta))
    if G == 1:
        out += math.log(pi)
        out += -H * math.exp(lp)
        if delta == 1:
            out += math.log(h) + lp
    else:
        out += math.log(1 - pi)
    return out


def test_binary_logit_equals_likelihood_ratio_oracle():
    g = np.random.default_rng(20)
    worst = 0.0
    for placement in PLACEMENTS:
        for _ in range(1000):
            G = int(g.random() < 0.6)
            delta = int(G == 1 and g.random() < 0.5)
            args = dict(G=G, delta=delta, H=g.uniform(0, 3), eta_rest=g.normal(),
                        alpha_j=g.normal(), lp_rest=g.normal(), beta_l=g.normal(),
                        mu=g.normal())
            got = exact_binary_logit(placement, **args)
            ref = (complete_data_loglik(1, placement, h=0.3, **args)
                   - complete_data_loglik(0, placement, h=0.3, **args))
            worst = max(worst, abs(float(got) - ref))
    assert worst < 1e-10


def test_binary_logit_special_cases():
    eta_rest = np.array([0.2, -1.0])
    out = exact_binary_logit(Placement.BOTH, np.zeros(2), np.zeros(2), np.ones(2), eta_rest,
                             0.7, np.zeros(2), 0.4, np.array([0.1, 0.3]))
    ref = np.logaddexp(0, eta_rest) - np.logaddexp(0, eta_rest + 0.7) + [0.1, 0.3]
    np.testing.assert_allclose(out, ref)
    mu = np.array([0.5, -2.0])
    for placement in PLACEMENTS:
        np.testing.assert_allclose(
            exact_binary_logit(placement, np.ones(2), np.ones(2), np.ones(2), eta_rest, 0.0,
                               np.zeros(2), 0.0, mu), mu)


def grid_cdf(logf, lo, hi, m=20001):
    x = np.linspace(lo, hi, m)
    f = np.exp(logf(x) - np.max(logf(x)))
    c = np.concatenate([[0], np.cumsum((f[1:] + f[:-1]) / 2)])
    return x, c / c[-1]


def test_mh_matches_quadrature_target():
    g = np.random.default_rng(21)
    n_sets = 10
    pars = dict(placement=Placement.BOTH, G=(g.random(n_sets) < 0.7) * 1.0,
                H=g.uniform(0.1, 2.0, n_sets), eta_rest=g.normal(size=n_sets),
                alpha_j=0.0, lp_rest=0.3 * g.normal(size=n_sets), beta_l=0.0,
                mu=g.normal(size=n_sets), sigma=g.uniform(0.6, 1.5, n_sets))
    alpha_j = g.normal(size=n_sets)
    beta_l = 0.5 * g.normal(size=n_sets)
    delta = pars["G"] * (g.random(n_sets) < 0.5)

    def logf(w):
        return exact_log_density(w, **{**pars, "alpha_j": alpha_j, "beta_l": beta_l,
                                       "delta": delta})

    draws, acc = metropolis_hastings(logf, pars["mu"].copy(), n_draws=5000, burn_in=500,
                                     thin=10, rng=rngmod.stream(5, 1))
    assert 0.05 < acc < 0.95
    for i in range(n_sets):
        def logf_i(w, i=i):
            one = {k: (v[i] if isinstance(v, np.ndarray) else v) for k, v in pars.items()}
            return exact_log_density(w, **{**one, "alpha_j": alpha_j[i], "beta_l": beta_l[i],
                                           "delta": delta[i]})
        mu, s = pars["mu"][i], pars["sigma"][i]
        x, cdf = grid_cdf(logf_i, mu - 8 * s, mu + 8 * s)
        stat = kstest(draws[:, i], lambda v: np.interp(v, x, cdf)).statistic
        assert stat < 0.05, (i, stat)


def test_mh_reduces_to_prior_when_uninformative():
    mu, sigma = 1.3, 0.8

    def logf(w):
        return exact_log_density(w, Placement.INCIDENCE, np.zeros(w.shape), 0.0, 1.0, 0.2, 0.0,
                                 0.0, 0.0, mu, sigma)

    draws, _ = metropolis_hastings(logf, np.zeros(1), n_draws=5000, burn_in=500, thin=10,
                                   rng=rngmod.stream(6))
    assert abs(draws.mean() - mu) < 3 * sigma / np.sqrt(5000)


def test_log_density_never_nan():
    w = np.linspace(-50, 50, 1001)
    for placement in PLACEMENTS:
        for G, delta in ((0, 0), (1, 0), (1, 1)):
            v = exact_log_density(w, placement, G, delta, 50.0, 3.0, 2.0, -1.0, 3.0, 0.0, 1.0)
            assert not np.isnan(v).any()


def test_zero_acceptance_raised():
    with pytest.raises(ZeroAcceptance):
        metropolis_hastings(lambda w: -0.5 * (w / 1e-4) ** 2, np.zeros(3), burn_in=200,
                            thin=1, proposal_sd=100.0, rng=rngmod.stream(0))


def test_cure_status_probability():
    assert expit(cure_status_logit(0.0, np.log(2))) == pytest.approx(1 / 3)
    assert cure_status_logit(0.4, 0.0) == 0.4
    g = np.random.default_rng(3)
    eta, lam = g.normal(size=50), g.exponential(size=50)
    pi, S = expit(eta), np.exp(-lam)
    np.testing.assert_allclose(expit(cure_status_logit(eta, lam)), pi * S / (1 - pi + pi * S))


def _state(ds, G=None):
    fit = fit_cure_em(ds, SPEC)
    return ImputationState(fit.alpha0, fit.alpha.copy(), fit.beta.copy(), fit.baseline,
                           np.zeros(ds.n) if G is None else G, np.array(ds.covariates))


def test_impute_G_respects_events_and_tail():
    ds = make_cure_data(seed=8)
    st = _state(ds)
    G = impute_G(st, ds, SPEC, rngmod.stream(1))
    assert np.all(G[ds.delta == 1] == 1)
    assert np.all(G[plateau_mask(ds.y, ds.delta)] == 0)
    assert set(np.unique(G)) <= {0.0, 1.0}


def test_mvn_degenerate_and_moment_oracle():
    g = rngmod.stream(2)
    mean = np.array([1.0, -2.0])
    np.testing.assert_allclose(_mvn(g, mean, np.zeros((2, 2))), mean)
    cov = np.array([[1.0, 0.3], [0.3, 0.5]])
    draws = np.array([_mvn(g, mean, cov) for _ in range(100_000)])
    np.testing.assert_allclose(np.cov(draws.T), cov, rtol=0.05)


def test_draws_recover_sign_of_incidence_effect():
    cfg = get_scenario("A")
    ds, latent = generate_replicate(cfg, rngmod.stream(31))
    G = latent.G.astype(float)
    st = _state(ds, G)
    neg = 0
    for r in range(200):
        a0, a, b = draw_model_params(st, ds, cfg.model_spec, rngmod.stream(32, r))
        neg += a[0] < 0
    assert neg / 200 > 0.9


def test_imputation_order_and_predictors():
    schema = (CovariateSpec("A", Kind.BINARY, Placement.BOTH),
              CovariateSpec("B", Kind.CONTINUOUS, Placement.INCIDENCE),
              CovariateSpec("C", Kind.BINARY, Placement.LATENCY))
    g = np.random.default_rng(0)
    n = 100
    cov = np.column_stack([g.random(n) < 0.5, g.normal(size=n), g.random(n) < 0.5]) * 1.0
    mask = np.zeros((n, 3), bool)
    mask[:20, 0] = True
    mask[:10, 1] = True
    mask[:10, 2] = True
    y = g.exponential(size=n)
    d = (g.random(n) < 0.6).astype(int)
    ds = SurvivalDataset(y, d, cov, schema, mask)
    spec = ModelSpec(("A", "B"), ("A", "C"))
    assert imputation_order(ds, spec.columns) == ["B", "C", "A"]
    assert conditional_predictors(ds, spec, "A") == ("B", "C")
    values = np.nan_to_num(np.array(ds.covariates))
    st = ImputationState(0.0, np.zeros(2), np.zeros(2),
                         StepFunction(np.sort(np.unique(y[d == 1])),
                                      np.arange(1, len(np.unique(y[d == 1])) + 1.0)),
                         d.astype(float), values)
    # both placement, binary: (p-1) + (d-1 non-overlap) + G, G*delta, G*H0 + (d-1) products
    _, names = approximate_predictors(st, ds, spec, "A")
    assert names == ["B", "C", "G", "G*delta", "G*H0", "G*H0*C"]
    _, names = approximate_predictors(st, ds, spec, "B")
    assert names == ["A", "C", "G"]
    _, names = approximate_predictors(st, ds, spec, "C")
    assert names == ["A", "B", "G*delta", "G*H0", "G*H0*A"]
    st.G = np.zeros(n)
    mat, names = approximate_predictors(st, ds, spec, "A")
    kept = [names[i] for i in _independent_columns(mat)]
    assert kept == ["B", "C"]


def test_config_validation():
    with pytest.raises(ValueError):
        ImputationConfig(n_imputations=1)
    with pytest.raises(ValueError):
        ImputationConfig(method="bogus")
    with pytest.raises(ValueError):
        ImputationConfig(mh_proposal_sd=0)
    with pytest.raises(ValueError):
        ImputationConfig(n_iterations=0)


@pytest.fixture(scope="module")
def incomplete():
    return make_cure_data(n=200, seed=12, w_missing=0.3)


@pytest.mark.parametrize("method", ["exact", "approximate"])
def test_chained_equations_invariants(incomplete, method):
    cfg = ImputationConfig(method=method, n_imputations=3, n_iterations=3, mh_burn_in=50,
                           mh_thin=5, seed=4)
    run = run_chained_equations(incomplete, SPEC, cfg)
    assert run.K == 3 and not run.failed and run.init_source == "complete-case"
    obs = ~incomplete.missing_mask
    for completed in run.datasets:
        assert not completed.missing_mask.any()
        np.testing.assert_array_equal(completed.covariates[obs], incomplete.covariates[obs])
    imputed = [d.covariates[incomplete.missing_mask[:, 0], 0] for d in run.datasets]
    assert not np.array_equal(imputed[0], imputed[1])
    assert len(run.draws[0]) == 3
    if method == "exact":
        assert 0 < run.diagnostics[0][0]["acceptance"]["W"] < 1
    again = run_chained_equations(incomplete, SPEC, cfg, workers=2)
    for a, b in zip(run.datasets, again.datasets):
        np.testing.assert_array_equal(a.covariates, b.covariates)


def test_binary_target_imputation():
    ds = make_cure_data(n=200, seed=13, w_missing=0.25, w_kind=Kind.BINARY)
    for method in ("exact", "approximate"):
        run = run_chained_equations(ds, SPEC, ImputationConfig(method=method, n_imputations=2,
                                                               n_iterations=2, seed=1))
        for completed in run.datasets:
            assert set(np.unique(completed.column("W"))) <= {0.0, 1.0}


def test_no_missing_returns_identical_copies():
    ds = make_cure_data(n=100, seed=14)
    run = run_chained_equations(ds, SPEC, ImputationConfig(n_imputations=4))
    assert run.K == 4 and all(d is ds for d in run.datasets)


def test_auxiliary_with_missing_rejected(incomplete):
    schema = (CovariateSpec("W", Kind.CONTINUOUS, Placement.AUXILIARY),) + incomplete.columns[1:]
    ds = SurvivalDataset(incomplete.y, incomplete.delta, incomplete.covariates, schema,
                         incomplete.missing_mask)
    with pytest.raises(ValueError, match="auxiliary"):
        run_chained_equations(ds, ModelSpec(("X",), ("Z",)), ImputationConfig())
