"""Weighted regression kernels: logistic, linear, Cox partial likelihood, Breslow.

All fits use Newton-Raphson with step halving. A fit stops when the
relative change of the log-likelihood drops below ``tol`` or after
``max_iter`` iterations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import Monotone, NoEvents, RankDeficient, Separation

MAX_ITER = 25
TOL = 1e-8
DIVERGENCE = 20.0
RIDGE = 1e-8


def _invert_information(info):
    """Invert an information matrix, adding a small ridge when near-singular.

    Returns ``(covariance, regularized)``.
    """
    info = 0.5 * (info + info.T)
    k = info.shape[0]
    if k == 0:
        return np.zeros((0, 0)), False
    eig = np.linalg.eigvalsh(info)
    regularized = eig[0] <= 1e-10 * max(1.0, abs(eig[-1]))
    if regularized:
        info = info + RIDGE * np.eye(k)
    cov = np.linalg.inv(info)
    return 0.5 * (cov + cov.T), bool(regularized)


def _converged(ll_new, ll_old, tol):
    return abs(ll_new - ll_old) <= tol * (abs(ll_old) + tol)


# ---------------------------------------------------------------------------
# logistic regression


@dataclass
class LogisticFit:
    intercept: float
    coefficients: np.ndarray
    covariance: np.ndarray
    converged: bool
    iterations: int
    loglik: float = np.nan
    regularized: bool = False

    @property
    def params(self) -> np.ndarray:
        return np.concatenate([[self.intercept], self.coefficients])

    def predict(self, design) -> np.ndarray:
        return expit(self.intercept + np.asarray(design, float) @ self.coefficients)


def logistic_loglik(params, outcome, design, weights=None):
    """Weighted Bernoulli log-likelihood, score and information.

    ``design`` excludes the intercept column; ``params`` is
    ``(intercept, coefficients...)``. Fractional outcomes in [0, 1] are
    allowed.
    """
    xd = np.column_stack([np.ones(len(outcome)), design])
    w = np.ones(len(outcome)) if weights is None else np.asarray(weights, float)
    eta = xd @ params
    p = expit(eta)
    ll = float(np.sum(w * (outcome * eta - np.logaddexp(0.0, eta))))
    score = xd.T @ (w * (outcome - p))
    info = (xd * (w * p * (1.0 - p))[:, None]).T @ xd
    return ll, score, info


def fit_logistic(outcome, design, weights=None, *, init=None,
                 max_iter=MAX_ITER, tol=TOL) -> LogisticFit:
    """Maximum-likelihood weighted logistic regression with an intercept.

    Parameters
    ----------
    outcome : array of shape (n,)
        Outcomes in [0, 1]; fractional values act as success weights.
    design : array of shape (n, p)
        Covariates without the intercept column (``p`` may be 0).
    weights : array of shape (n,), optional
        Non-negative case weights.
    init : array of shape (p + 1,), optional
        Starting point ``(intercept, coefficients...)``.

    Raises
    ------
    RankDeficient
        If the design is not of full column rank on the positively weighted rows.
    Separation
        If the outcome is degenerate on the weighted support or a coefficient
        exceeds 20 in absolute value during the iterations.
    """
    outcome = np.asarray(outcome, float)
    n = len(outcome)
    design = np.asarray(design, float).reshape(n, -1)
    w = np.ones(n) if weights is None else np.asarray(weights, float)
    if np.any(w < 0) or w.sum() <= 0:
        raise ValueError("weights must be non-negative with positive sum")
    k = design.shape[1] + 1
    support = w > 0
    xd = np.column_stack([np.ones(n), design])[support]
    if np.linalg.matrix_rank(xd) < k:
        raise RankDeficient("logistic design is rank deficient on the weighted support")
    succ = float(np.sum(w * outcome))
    fail = float(np.sum(w * (1.0 - outcome)))
    if succ <= 1e-12 * w.sum() or fail <= 1e-12 * w.sum():
        raise Separation("outcome is constant on the weighted support")

    params = np.zeros(k) if init is None else np.array(init, float)
    if init is None:
        params[0] = np.log(succ / fail)
    ll, score, info = logistic_loglik(params, outcome, design, w)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        cov, _ = _invert_information(info)
        step = cov @ score
        for _ in range(30):
            cand = params + step
            ll_new, score_new, info_new = logistic_loglik(cand, outcome, design, w)
            if ll_new >= ll - 1e-12 * abs(ll):
                break
            step = step / 2
        else:
            converged = True
            break
        if np.max(np.abs(cand)) > DIVERGENCE:
            raise Separation(f"coefficient diverged ({np.max(np.abs(cand)):.1f})")
        ll_old = ll
        params, ll, score, info = cand, ll_new, score_new, info_new
        if _converged(ll, ll_old, tol):
            converged = True
            break
    cov, reg = _invert_information(info)
    return LogisticFit(float(params[0]), params[1:].copy(), cov, converged, it, ll, reg)


# ---------------------------------------------------------------------------
# linear regression


@dataclass
class LinearFit:
    coefficients: np.ndarray  # intercept first
    covariance: np.ndarray
    sigma: float
    df: int


def fit_linear(outcome, design) -> LinearFit:
    """Ordinary least squares with an intercept."""
    outcome = np.asarray(outcome, float)
    n = len(outcome)
    xd = np.column_stack([np.ones(n), np.asarray(design, float).reshape(n, -1)])
    k = xd.shape[1]
    if n <= k or np.linalg.matrix_rank(xd) < k:
        raise RankDeficient("linear design is rank deficient")
    coef, *_ = np.linalg.lstsq(xd, outcome, rcond=None)
    resid = outcome - xd @ coef
    df = n - k
    sigma = float(np.sqrt(resid @ resid / df))
    xtx_inv = np.linalg.inv(xd.T @ xd)
    return LinearFit(coef, sigma**2 * xtx_inv, sigma, df)


# ---------------------------------------------------------------------------
# Cox partial likelihood (Breslow ties)


@dataclass
class CoxFit:
    coefficients: np.ndarray
    covariance: np.ndarray
    converged: bool
    iterations: int = 0
    loglik: float = np.nan
    rank_deficient: bool = False


def _risk_index(y):
    """Ascending order of ``y`` and, for each sorted row, the first sorted
    position whose time equals it (start of its risk set)."""
    order = np.argsort(y, kind="stable")
    ys = y[order]
    first = np.searchsorted(ys, ys, side="left")
    return order, ys, first


def _suffix(a):
    return np.cumsum(a[::-1], axis=0)[::-1]


def cox_partial_likelihood(beta, y, delta, design, weights=None, *, _sorted=None):
    """Weighted Cox log partial likelihood with Breslow ties.

    Returns ``(loglik, score, information)``; the risk set of an event at
    time t is every subject with follow-up time >= t, each contributing
    ``weight * exp(design @ beta)``.
    """
    y = np.asarray(y, float)
    n = len(y)
    design = np.asarray(design, float).reshape(n, -1)
    w = np.ones(n) if weights is None else np.asarray(weights, float)
    order, _, first = _sorted if _sorted is not None else _risk_index(y)
    x = design[order]
    ws = w[order]
    ev = (np.asarray(delta)[order] == 1) & (ws > 0)
    lp = x @ beta
    shift = lp.max() if n else 0.0
    r = ws * np.exp(lp - shift)
    s0 = _suffix(r)[first]
    s1 = _suffix(r[:, None] * x)[first]
    s2 = _suffix(r[:, None, None] * x[:, :, None] * x[:, None, :])[first]
    we = ws[ev]
    s0e = s0[ev]
    ll = float(np.sum(we * (lp[ev] - shift - np.log(s0e))))
    xbar = s1[ev] / s0e[:, None]
    score = (we[:, None] * (x[ev] - xbar)).sum(axis=0)
    info = np.einsum("i,ijk->jk", we, s2[ev] / s0e[:, None, None]) - \
        np.einsum("i,ij,ik->jk", we, xbar, xbar)
    return ll, score, info


def fit_cox(y, delta, design, weights=None, *, init=None,
            max_iter=MAX_ITER, tol=TOL) -> CoxFit:
    """Maximise the weighted Cox partial likelihood (Breslow ties).

    A design column carrying no information leaves its coefficient at the
    starting value; the information matrix is then regularised with a small
    ridge and the fit is flagged ``rank_deficient`` (its variance becomes
    very large rather than infinite).

    Raises
    ------
    NoEvents
        No event among positively weighted subjects.
    Monotone
        A coefficient exceeds 20 in absolute value.
    """
    y = np.asarray(y, float)
    n = len(y)
    delta = np.asarray(delta)
    design = np.asarray(design, float).reshape(n, -1)
    w = np.ones(n) if weights is None else np.asarray(weights, float)
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    if not np.any((delta == 1) & (w > 0)):
        raise NoEvents("no events among positively weighted subjects")
    d = design.shape[1]
    beta = np.zeros(d) if init is None else np.array(init, float)
    if d == 0:
        return CoxFit(beta, np.zeros((0, 0)), True, 0,
                      cox_partial_likelihood(beta, y, delta, design, w)[0])
    srt = _risk_index(y)
    ll, score, info = cox_partial_likelihood(beta, y, delta, design, w, _sorted=srt)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        cov, _ = _invert_information(info)
        step = cov @ score
        for _ in range(30):
            cand = beta + step
            ll_new, score_new, info_new = cox_partial_likelihood(cand, y, delta, design, w, _sorted=srt)
            if ll_new >= ll - 1e-12 * abs(ll):
                break
            step = step / 2
        else:
            converged = True
            break
        if np.max(np.abs(cand)) > DIVERGENCE:
            raise Monotone(f"Cox coefficient diverged ({np.max(np.abs(cand)):.1f})")
        ll_old = ll
        beta, ll, score, info = cand, ll_new, score_new, info_new
        if _converged(ll, ll_old, tol):
            converged = True
            break
    cov, reg = _invert_information(info)
    return CoxFit(beta, cov, converged, it, ll, reg)


# ---------------------------------------------------------------------------
# baseline cumulative hazard


@dataclass(frozen=True, eq=False)
class StepFunction:
    """Right-continuous non-decreasing step function, zero before the first knot."""

    knots: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        knots = np.asarray(self.knots, float)
        values = np.asarray(self.values, float)
        if knots.shape != values.shape:
            raise ValueError("knots and values must have the same shape")
        if np.any(np.diff(knots) <= 0):
            raise ValueError("knots must be strictly increasing")
        object.__setattr__(self, "knots", knots)
        object.__setattr__(self, "values", values)

    def __call__(self, t):
        t = np.asarray(t, float)
        idx = np.searchsorted(self.knots, t, side="right") - 1
        out = np.where(idx >= 0, self.values[np.maximum(idx, 0)], 0.0)
        return out if out.ndim else float(out)

    @property
    def jumps(self) -> np.ndarray:
        return np.diff(self.values, prepend=0.0)

    @property
    def last(self) -> float:
        return float(self.values[-1]) if len(self.values) else 0.0


def breslow_cumhaz(y, delta, linear_predictor, q=None) -> StepFunction:
    """Breslow baseline cumulative hazard with risk-set weights ``q``.

    At each distinct event time t_j the increment is
    ``D(t_j) / sum_{i: y_i >= t_j} q_i exp(lp_i)``, where ``D(t_j)`` counts
    the events at t_j. With ``q`` all ones and a zero linear predictor this
    is the Nelson-Aalen estimator.
    """
    y = np.asarray(y, float)
    delta = np.asarray(delta)
    n = len(y)
    q = np.ones(n) if q is None else np.asarray(q, float)
    if np.any(q[delta == 1] != 1.0):
        raise ValueError("q must equal 1 for every event")
    if not delta.any():
        raise NoEvents("no events")
    lp = np.asarray(linear_predictor, float)
    order, ys, first = _risk_index(y)
    r = q[order] * np.exp(lp[order])
    s0 = _suffix(r)
    times, counts = np.unique(y[delta == 1], return_counts=True)
    pos = np.searchsorted(ys, times, side="left")
    inc = counts / s0[pos]
    return StepFunction(times, np.cumsum(inc))
