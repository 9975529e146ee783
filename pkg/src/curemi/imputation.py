"""Chained-equations multiple imputation of covariates in the cure model.

Each imputed dataset is produced by iterating four steps on a running
state (current parameter draws, baseline cumulative hazard, latent uncured
indicator ``G`` and the filled covariate matrix):

1. re-estimate the baseline from the posterior uncured weights,
2. draw ``(alpha0, alpha)`` and ``beta`` from the normal approximation of
   the logistic fit of ``G`` on X and the Cox fit on subjects with ``G=1``,
3. draw ``G`` for censored subjects up to the last event time,
4. redraw every incomplete covariate, either from its exact conditional
   distribution (closed-form logit for binary covariates, random-walk
   Metropolis-Hastings for continuous ones) or from a regression on
   outcome-derived predictors (the approximate method).

The incomplete covariate may sit in the incidence model only, the latency
model only, or both.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import rng as rngmod
from .cure import _initial, fit_cure_em, model_arrays, posterior_uncured
from .data import Kind, ModelSpec, Placement, SurvivalDataset, plateau_mask
from .errors import CureMIError, InitFailure, TooManyFailures, ZeroAcceptance
from .glm import StepFunction, breslow_cumhaz, fit_cox, fit_linear, fit_logistic

log = logging.getLogger(__name__)

EXACT = "exact"
APPROXIMATE = "approximate"
SIGMA_FLOOR = 1e-6
MIN_ACCEPTANCE = 0.01
# Approximate continuous draws are kept within the observed range widened by
# this multiple of its width on either side. The regression on G*H0(y) can
# otherwise extrapolate from a single large tail jump of the baseline and
# feed back into it on the next iteration.
CLAMP_WIDTH = 0.5


@dataclass(frozen=True)
class ImputationConfig:
    method: str = EXACT
    n_imputations: int = 10
    n_iterations: int = 10
    mh_burn_in: int = 500
    mh_thin: int = 100
    mh_proposal_sd: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.method not in (EXACT, APPROXIMATE):
            raise ValueError(f"unknown imputation method {self.method!r}")
        if self.n_imputations < 2:
            raise ValueError("n_imputations must be at least 2")
        if self.n_iterations < 1:
            raise ValueError("n_iterations must be at least 1")
        if self.mh_proposal_sd <= 0:
            raise ValueError("mh_proposal_sd must be positive")
        if self.mh_burn_in < 0 or self.mh_thin < 1:
            raise ValueError("mh_burn_in must be >= 0 and mh_thin >= 1")


@dataclass
class ImputationState:
    alpha0: float
    alpha: np.ndarray
    beta: np.ndarray
    baseline: StepFunction
    G: np.ndarray
    values: np.ndarray


@dataclass
class ConditionalModel:
    target: str
    placement: Placement
    kind: Kind
    predictors: tuple
    theta: np.ndarray
    sigma: float = np.nan
    covariance: np.ndarray | None = None

    def mean(self, values, ds):
        p = values[:, [ds.index(c) for c in self.predictors]]
        return self.theta[0] + p @ self.theta[1:]


@dataclass
class ImputationRun:
    datasets: list
    draws: list
    diagnostics: list
    config: ImputationConfig
    failed: dict = field(default_factory=dict)
    init_source: str = "none"

    @property
    def K(self):
        return len(self.datasets)


# ---------------------------------------------------------------------------
# helpers


def _designs(state, ds, spec):
    X = state.values[:, [ds.index(c) for c in spec.incidence]]
    Z = state.values[:, [ds.index(c) for c in spec.latency]]
    return X, Z


def _mvn(g, mean, cov):
    mean = np.asarray(mean, float)
    if mean.size == 0:
        return mean.copy()
    return g.multivariate_normal(mean, cov, method="eigh")


def check_state(state, ds):
    """Assert the latent indicator respects the events and the zero tail."""
    G = state.G
    if np.any(G[ds.delta == 1] != 1):
        raise AssertionError("G must equal 1 for every event")
    if np.any(G[plateau_mask(ds.y, ds.delta)] != 0):
        raise AssertionError("G must equal 0 beyond the last event time")
    if np.isnan(state.values[:, _imputed_columns(ds)]).any():
        raise AssertionError("unfilled covariate cell")


def _imputed_columns(ds):
    return [j for j in range(len(ds.names)) if ds.missing_mask[:, j].any()]


def imputation_order(ds, columns):
    """Incomplete columns sorted by ascending missing fraction, ties by column index."""
    frac = ds.missing_mask.mean(axis=0)
    idx = [ds.index(c) for c in columns if ds.missing_mask[:, ds.index(c)].any()]
    return [ds.names[j] for j in sorted(idx, key=lambda j: (frac[j], j))]


def auxiliary_columns(ds, spec):
    model = set(spec.columns)
    return [c.name for c in ds.columns
            if c.name not in model and c.placement is Placement.AUXILIARY]


def conditional_predictors(ds, spec, target):
    """Covariates entering the location of the conditional covariate model.

    Incidence covariates other than the target, latency covariates other
    than the target that are not already incidence covariates, then
    auxiliary columns.
    """
    inc = [c for c in spec.incidence if c != target]
    lat = [c for c in spec.latency if c != target and c not in spec.incidence]
    aux = [c for c in auxiliary_columns(ds, spec) if c != target]
    return tuple(inc + lat + aux)


# ---------------------------------------------------------------------------
# algorithm steps


def estimate_baseline(state, ds, spec):
    """Weighted Breslow baseline from the posterior uncured weights of the state."""
    X, Z = _designs(state, ds, spec)
    q = posterior_uncured(ds.y, ds.delta, X, Z, state.alpha0, state.alpha, state.beta,
                          state.baseline)
    return breslow_cumhaz(ds.y, ds.delta, Z @ state.beta, q)


def draw_model_params(state, ds, spec, rng, events=None):
    """Draw ``(alpha0, alpha, beta)`` around the fits to the current ``G``.

    On a kernel failure the previous draws are kept and the failure is
    appended to ``events``.
    """
    X, Z = _designs(state, ds, spec)
    G = state.G
    a0, a, b = state.alpha0, state.alpha, state.beta
    try:
        inc = fit_logistic(G, X, init=np.concatenate([[a0], a]))
        draw = _mvn(rng, inc.params, inc.covariance)
        a0, a = float(draw[0]), draw[1:]
    except CureMIError as exc:
        log.debug("incidence draw failed: %s", exc)
        if events is not None:
            events.append(f"incidence:{type(exc).__name__}")
    sub = G == 1
    try:
        lat = fit_cox(ds.y[sub], ds.delta[sub], Z[sub], init=state.beta)
        b = _mvn(rng, lat.coefficients, lat.covariance)
    except CureMIError as exc:
        log.debug("latency draw failed: %s", exc)
        if events is not None:
            events.append(f"latency:{type(exc).__name__}")
    return a0, np.asarray(a, float), np.asarray(b, float)


def cure_status_logit(eta, cumhaz):
    """Logit of P(G=1) for a censored subject: ``eta - H0(y) exp(z'beta)``."""
    return eta - cumhaz


def impute_G(state, ds, spec, rng):
    """Draw the uncured indicator: 1 for events, 0 beyond the last event time,
    Bernoulli otherwise."""
    X, Z = _designs(state, ds, spec)
    eta = state.alpha0 + X @ state.alpha
    cumhaz = state.baseline(ds.y) * np.exp(Z @ state.beta)
    p = expit(cure_status_logit(eta, cumhaz))
    G = (rng.random(ds.n) < p).astype(float)
    G[ds.delta == 1] = 1.0
    G[plateau_mask(ds.y, ds.delta)] = 0.0
    return G


# ---------------------------------------------------------------------------
# exact conditionals


def exact_binary_logit(placement, G, delta, H, eta_rest, alpha_j, lp_rest, beta_l, mu):
    """Closed-form logit of P(W=1 | rest) for a binary covariate.

    ``eta_rest`` is the incidence linear predictor without the target,
    ``lp_rest`` the latency one; ``H`` is the baseline cumulative hazard at
    the subject's follow-up time and ``mu`` the location of the covariate
    model.
    """
    placement = Placement(placement)
    out = np.asarray(mu, float).copy()
    if placement in (Placement.LATENCY, Placement.BOTH):
        out += G * delta * beta_l - G * H * np.exp(lp_rest) * np.expm1(beta_l)
    if placement in (Placement.INCIDENCE, Placement.BOTH):
        out += G * alpha_j + np.logaddexp(0.0, eta_rest) - np.logaddexp(0.0, eta_rest + alpha_j)
    return out


def exact_log_density(w, placement, G, delta, H, eta_rest, alpha_j, lp_rest, beta_l, mu, sigma):
    """Unnormalised log density of a continuous covariate given everything else.

    Finite inputs never produce ``nan``; a vanishing density yields ``-inf``.
    """
    placement = Placement(placement)
    w = np.asarray(w, float)
    out = -0.5 * ((w - mu) / sigma) ** 2
    if placement in (Placement.INCIDENCE, Placement.BOTH):
        eta = eta_rest + alpha_j * w
        out = out + G * eta - np.logaddexp(0.0, eta)
    if placement in (Placement.LATENCY, Placement.BOTH):
        lp = lp_rest + beta_l * w
        with np.errstate(over="ignore", divide="ignore"):
            ch = np.where(H > 0, np.exp(np.log(np.where(H > 0, H, 1.0)) + lp), 0.0)
        out = out + np.where(G > 0, delta * lp - ch, 0.0)
    return out


def metropolis_hastings(log_density, init, *, n_draws=1, burn_in=500, thin=100,
                        proposal_sd=1.0, rng=None):
    """Vectorised random-walk Metropolis-Hastings with a normal proposal.

    Runs one independent chain per element of ``init``. After ``burn_in``
    steps every ``thin``-th state is recorded until ``n_draws`` draws are
    collected.

    Returns
    -------
    draws : array of shape (n_draws, n_chains)
    acceptance : float
        Acceptance rate over all chains and steps.

    Raises
    ------
    ZeroAcceptance
        If fewer than 1% of burn-in proposals are accepted.
    """
    rng = np.random.default_rng() if rng is None else rng
    x = np.array(init, dtype=float)
    lp = log_density(x)
    n = x.size
    draws = np.empty((n_draws, n))
    accepted = 0
    burn_accepted = 0
    total = burn_in + thin * n_draws
    k = 0
    for s in range(total):
        prop = x + proposal_sd * rng.standard_normal(n)
        lpp = log_density(prop)
        with np.errstate(invalid="ignore"):
            acc = np.log(rng.random(n)) < (lpp - lp)
        x = np.where(acc, prop, x)
        lp = np.where(acc, lpp, lp)
        na = int(acc.sum())
        accepted += na
        if s < burn_in:
            burn_accepted += na
            if s == burn_in - 1 and burn_accepted < MIN_ACCEPTANCE * burn_in * n:
                raise ZeroAcceptance(
                    f"acceptance {burn_accepted / (burn_in * n):.4f} during burn-in")
        elif (s - burn_in + 1) % thin == 0:
            draws[k] = x
            k += 1
    return draws, accepted / (total * n) if n else 1.0


def _target_terms(state, ds, spec, target, rows):
    """Per-row pieces of the exact conditional for ``target`` on ``rows``."""
    X, Z = _designs(state, ds, spec)
    placement = spec.placement_of(target)
    alpha_j = beta_l = 0.0
    eta_rest = state.alpha0 + X @ state.alpha
    lp_rest = Z @ state.beta
    w = state.values[:, ds.index(target)]
    if target in spec.incidence:
        alpha_j = float(state.alpha[spec.incidence.index(target)])
        eta_rest = eta_rest - alpha_j * w
    if target in spec.latency:
        beta_l = float(state.beta[spec.latency.index(target)])
        lp_rest = lp_rest - beta_l * w
    H = state.baseline(ds.y)
    return dict(placement=placement, G=state.G[rows], delta=ds.delta[rows].astype(float),
                H=H[rows], eta_rest=eta_rest[rows], alpha_j=alpha_j,
                lp_rest=lp_rest[rows], beta_l=beta_l)


def draw_conditional_model(state, ds, spec, target, rng):
    """Fit the covariate model for ``target`` on the current filled data and
    draw its parameters from their asymptotic normal distribution."""
    preds = conditional_predictors(ds, spec, target)
    P = state.values[:, [ds.index(c) for c in preds]]
    wcol = state.values[:, ds.index(target)]
    kind = ds.spec_of(target).kind
    if kind is Kind.BINARY:
        fit = fit_logistic(wcol, P)
        theta = _mvn(rng, fit.params, fit.covariance)
        return ConditionalModel(target, spec.placement_of(target), kind, preds, theta,
                                covariance=fit.covariance)
    fit = fit_linear(wcol, P)
    theta = _mvn(rng, fit.coefficients, fit.covariance)
    sigma = max(fit.sigma + fit.sigma / np.sqrt(2.0 * fit.df) * rng.standard_normal(), SIGMA_FLOOR)
    return ConditionalModel(target, spec.placement_of(target), kind, preds, theta, sigma,
                            fit.covariance)


def impute_exact_binary(state, ds, spec, target, rng, model=None):
    """Redraw the missing cells of a binary covariate from its exact conditional."""
    if model is None:
        model = draw_conditional_model(state, ds, spec, target, rng)
    rows = ds.missing_mask[:, ds.index(target)]
    terms = _target_terms(state, ds, spec, target, rows)
    mu = model.mean(state.values, ds)[rows]
    logit = exact_binary_logit(mu=mu, **terms)
    col = state.values[:, ds.index(target)].copy()
    col[rows] = (rng.random(int(rows.sum())) < expit(logit)).astype(float)
    return col


def impute_exact_continuous(state, ds, spec, target, rng, config, model=None):
    """Redraw the missing cells of a continuous covariate by Metropolis-Hastings.

    Returns ``(column, acceptance_rate)``.
    """
    if model is None:
        model = draw_conditional_model(state, ds, spec, target, rng)
    rows = ds.missing_mask[:, ds.index(target)]
    terms = _target_terms(state, ds, spec, target, rows)
    mu = model.mean(state.values, ds)[rows]
    col = state.values[:, ds.index(target)].copy()

    def logf(w):
        return exact_log_density(w, mu=mu, sigma=model.sigma, **terms)

    draws, acc = metropolis_hastings(logf, col[rows], n_draws=1, burn_in=config.mh_burn_in,
                                     thin=config.mh_thin, proposal_sd=config.mh_proposal_sd,
                                     rng=rng)
    col[rows] = draws[-1]
    return col, acc


# ---------------------------------------------------------------------------
# approximate conditionals


def approximate_predictors(state, ds, spec, target):
    """Derived predictor matrix for the approximate conditional of ``target``.

    Returns ``(matrix, names)``. Beyond the covariate predictors the columns
    are ``G`` (incidence or both), ``G*delta`` and ``G*H0(y)`` (latency or
    both) and, for binary targets in the latency, ``G*H0(y)*Z_s`` for every
    other latency covariate.
    """
    placement = spec.placement_of(target)
    kind = ds.spec_of(target).kind
    names = list(conditional_predictors(ds, spec, target))
    cols = [state.values[:, ds.index(c)] for c in names]
    G = state.G
    GH = G * state.baseline(ds.y)
    if placement in (Placement.INCIDENCE, Placement.BOTH):
        cols.append(G)
        names.append("G")
    if placement in (Placement.LATENCY, Placement.BOTH):
        cols += [G * ds.delta, GH]
        names += ["G*delta", "G*H0"]
        if kind is Kind.BINARY:
            for c in spec.latency:
                if c != target:
                    cols.append(GH * state.values[:, ds.index(c)])
                    names.append(f"G*H0*{c}")
    mat = np.column_stack(cols) if cols else np.zeros((ds.n, 0))
    return mat, names


def _independent_columns(mat):
    """Greedy selection of columns that keep the (intercept-augmented) design full rank."""
    keep = []
    base = np.ones((mat.shape[0], 1))
    rank = 1
    for j in range(mat.shape[1]):
        trial = np.column_stack([base, mat[:, keep + [j]]])
        r = np.linalg.matrix_rank(trial)
        if r > rank:
            keep.append(j)
            rank = r
    return keep


def impute_approximate(state, ds, spec, target, rng, events=None):
    """Redraw missing cells of ``target`` by regression on derived predictors.

    The regression (linear for continuous, logistic for binary targets) is
    fitted on the observed cells of the target; its coefficients are
    perturbed by a draw from their normal approximation before predictive
    draws fill the missing cells. Degenerate or collinear derived columns
    are dropped, and continuous draws are clamped (see ``CLAMP_WIDTH``).
    """
    j = ds.index(target)
    obs = ~ds.missing_mask[:, j]
    rows = ~obs
    mat, names = approximate_predictors(state, ds, spec, target)
    keep = _independent_columns(mat[obs])
    if len(keep) < mat.shape[1]:
        dropped = [names[i] for i in range(len(names)) if i not in keep]
        log.debug("approximate model for %s dropped columns %s", target, dropped)
        if events is not None:
            events.append(f"dropped:{target}:{','.join(dropped)}")
    mat = mat[:, keep]
    wobs = state.values[obs, j]
    col = state.values[:, j].copy()
    if ds.spec_of(target).kind is Kind.BINARY:
        fit = fit_logistic(wobs, mat[obs])
        theta = _mvn(rng, fit.params, fit.covariance)
        p = expit(theta[0] + mat[rows] @ theta[1:])
        col[rows] = (rng.random(int(rows.sum())) < p).astype(float)
    else:
        fit = fit_linear(wobs, mat[obs])
        sigma = max(fit.sigma + fit.sigma / np.sqrt(2.0 * fit.df) * rng.standard_normal(),
                    SIGMA_FLOOR)
        theta = _mvn(rng, fit.coefficients, fit.covariance)
        draw = theta[0] + mat[rows] @ theta[1:] + sigma * rng.standard_normal(int(rows.sum()))
        lo, hi = wobs.min(), wobs.max()
        lo, hi = lo - CLAMP_WIDTH * (hi - lo), hi + CLAMP_WIDTH * (hi - lo)
        clamped = (draw < lo) | (draw > hi)
        if clamped.any():
            log.debug("clamped %d approximate draws of %s", int(clamped.sum()), target)
            if events is not None:
                events.append(f"clamped:{target}:{int(clamped.sum())}")
        col[rows] = np.clip(draw, lo, hi)
    return col


# ---------------------------------------------------------------------------
# driver


def initial_parameters(ds, spec):
    """Complete-case cure fit, falling back to the event-indicator start."""
    cc = ds.subset(~ds.missing_in(spec.columns))
    try:
        fit = fit_cure_em(cc, spec, covariance=False)
        return fit.alpha0, fit.alpha, fit.beta, fit.baseline, "complete-case"
    except CureMIError as exc:
        log.info("complete-case cure fit failed (%s); using event-indicator start", exc)
    try:
        y, delta, X, Z = model_arrays(cc, spec)
        a0, a, b, base = _initial(y, delta, X, Z)
        return a0, a, b, base, "event-indicator"
    except CureMIError as exc:
        raise InitFailure(f"cannot initialise from complete cases: {exc}") from exc


def random_fill(ds, columns, rng):
    """Fill missing cells: Bernoulli(observed mean) for binary columns,
    resampled observed values for continuous ones."""
    values = np.array(ds.covariates, copy=True)
    for c in columns:
        j = ds.index(c)
        miss = ds.missing_mask[:, j]
        if not miss.any():
            continue
        obs = values[~miss, j]
        if obs.size == 0:
            raise InitFailure(f"column {c!r} has no observed values")
        if ds.columns[j].kind is Kind.BINARY:
            values[miss, j] = (rng.random(int(miss.sum())) < obs.mean()).astype(float)
        else:
            values[miss, j] = rng.choice(obs, size=int(miss.sum()), replace=True)
    return values


def _impute_dataset(args):
    ds, spec, config, init, k = args
    seed = config.seed
    order = imputation_order(ds, spec.columns)
    a0, a, b, base, _ = init
    values = random_fill(ds, order, rngmod.stream(seed, k, 0, rngmod.TAG_FILL))
    state = ImputationState(float(a0), np.array(a, float), np.array(b, float), base,
                            np.zeros(ds.n), values)
    state.G = impute_G(state, ds, spec, rngmod.stream(seed, k, 0, rngmod.TAG_CURE_STATUS))
    draws, diags = [], []
    for m in range(1, config.n_iterations + 1):
        events = []
        state.baseline = estimate_baseline(state, ds, spec)
        state.alpha0, state.alpha, state.beta = draw_model_params(
            state, ds, spec, rngmod.stream(seed, k, m, rngmod.TAG_PARAMS), events)
        state.G = impute_G(state, ds, spec, rngmod.stream(seed, k, m, rngmod.TAG_CURE_STATUS))
        acceptance = {}
        for c in order:
            j = ds.index(c)
            g = rngmod.stream(seed, k, m, rngmod.TAG_COVARIATE, j)
            if config.method == APPROXIMATE:
                col = impute_approximate(state, ds, spec, c, g, events)
            elif ds.columns[j].kind is Kind.BINARY:
                col = impute_exact_binary(state, ds, spec, c, g)
            else:
                col, acceptance[c] = impute_exact_continuous(state, ds, spec, c, g, config)
            state.values[:, j] = col
        check_state(state, ds)
        draws.append({"iteration": m, "alpha0": state.alpha0, "alpha": state.alpha.tolist(),
                      "beta": state.beta.tolist()})
        diags.append({"iteration": m, "G_uncured": int(state.G.sum()),
                      "G_imputed": int(((ds.delta == 0) & ~plateau_mask(ds.y, ds.delta)).sum()),
                      "acceptance": acceptance, "events": events})
    mask = ds.missing_mask.copy()
    for c in order:
        mask[:, ds.index(c)] = False
    return ds.with_covariates(state.values, mask), draws, diags


def run_chained_equations(ds: SurvivalDataset, spec: ModelSpec, config: ImputationConfig,
                          *, workers=1) -> ImputationRun:
    """Produce ``config.n_imputations`` completed datasets.

    All datasets start from the same complete-case cure fit and use
    independent random streams keyed by ``(config.seed, k, iteration, step)``.
    A dataset whose chain fails is dropped and reported in ``run.failed``; if
    half or more fail the run aborts with :class:`TooManyFailures`.
    """
    for c in auxiliary_columns(ds, spec):
        if ds.missing_mask[:, ds.index(c)].any():
            raise ValueError(f"auxiliary column {c!r} has missing values; impute it beforehand")
    for c in spec.columns:
        ds.index(c)
    if not ds.delta.any():
        raise InitFailure("no events")
    K = config.n_imputations
    if not ds.missing_in(spec.columns).any():
        return ImputationRun([ds for _ in range(K)], [[] for _ in range(K)],
                             [[] for _ in range(K)], config)
    init = initial_parameters(ds, spec)
    jobs = [(ds, spec, config, init, k) for k in range(K)]
    results, failed = [None] * K, {}

    def collect(k, fn):
        try:
            results[k] = fn()
        except CureMIError as exc:
            failed[k] = f"{type(exc).__name__}: {exc}"

    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            futures = [ex.submit(_impute_dataset, j) for j in jobs]
            for k, fut in enumerate(futures):
                collect(k, fut.result)
    else:
        for k, job in enumerate(jobs):
            collect(k, lambda job=job: _impute_dataset(job))
    if len(failed) >= K / 2:
        raise TooManyFailures(f"{len(failed)} of {K} imputed datasets failed: {failed}")
    ok = [r for r in results if r is not None]
    return ImputationRun([r[0] for r in ok], [r[1] for r in ok], [r[2] for r in ok],
                         config, failed, init[4])
