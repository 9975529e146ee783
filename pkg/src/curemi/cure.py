"""EM estimation of the Cox proportional-hazards mixture cure model.

The incidence (probability of being uncured) is logistic in the incidence
covariates X, the latency (survival of the uncured) is a Cox model in the
latency covariates Z with a nonparametric baseline cumulative hazard.
Censored subjects beyond the last event time are treated as cured (the
zero-tail constraint).
"""

from __future__ import annotations

import csv
import logging
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.special import expit
from scipy.stats import norm

from . import rng as rngmod
from .data import ModelSpec, SurvivalDataset, format_number, plateau_mask
from .errors import CureMIError, MissingDataPresent, NoEvents, TooManyFailures
from .glm import StepFunction, breslow_cumhaz, fit_cox, fit_logistic

log = logging.getLogger(__name__)

EM_TOL = 1e-7
EM_MAX_ITER = 500


@dataclass
class CureFit:
    alpha0: float
    alpha: np.ndarray
    beta: np.ndarray
    baseline: StepFunction
    q: np.ndarray
    loglik_trace: np.ndarray
    converged: bool
    iterations: int = 0
    names: tuple = ()
    covariance: np.ndarray | None = None
    se: np.ndarray | None = None

    @property
    def params(self) -> np.ndarray:
        return np.concatenate([[self.alpha0], self.alpha, self.beta])

    @property
    def loglik(self) -> float:
        return float(self.loglik_trace[-1])

    @property
    def information_se(self):
        if self.covariance is None:
            return None
        return np.sqrt(np.diag(self.covariance))


def model_arrays(ds: SurvivalDataset, spec: ModelSpec):
    """Return ``(y, delta, X, Z)`` for the model columns, refusing missing cells."""
    for c in spec.columns:
        ds.index(c)
    if ds.missing_in(spec.columns).any():
        raise MissingDataPresent("model covariates contain missing values")
    return ds.y, ds.delta, ds.matrix(spec.incidence), ds.matrix(spec.latency)


# ---------------------------------------------------------------------------
# E-step and observed likelihood


def posterior_uncured(y, delta, X, Z, alpha0, alpha, beta, baseline):
    """Posterior probability of being uncured for every subject.

    Equals 1 for events, 0 for censored subjects beyond the last event time
    and ``pi S_u / (1 - pi + pi S_u)`` otherwise, evaluated on the logit
    scale as ``expit(eta - H0(y) exp(z'beta))``.
    """
    eta = alpha0 + X @ alpha
    cumhaz = baseline(y) * np.exp(Z @ beta)
    q = expit(eta - cumhaz)
    q = np.where(delta == 1, 1.0, q)
    q[plateau_mask(y, delta)] = 0.0
    return q


def e_step(ds, spec, alpha0, alpha, beta, baseline):
    y, delta, X, Z = model_arrays(ds, spec)
    return posterior_uncured(y, delta, X, Z, alpha0, alpha, beta, baseline)


def observed_loglik(y, delta, X, Z, alpha0, alpha, beta, baseline) -> float:
    """Observed-data log-likelihood under the zero-tail constraint.

    Events contribute ``log pi + log h0(y) + z'beta - Lambda``, censored
    subjects up to the last event time ``log(1 - pi + pi exp(-Lambda))``,
    and censored subjects beyond it ``log(1 - pi)``.
    """
    eta = alpha0 + X @ alpha
    lp = Z @ beta
    cumhaz = baseline(y) * np.exp(lp)
    ev = delta == 1
    pl = plateau_mask(y, delta)
    mid = ~ev & ~pl
    jumps = baseline.jumps
    idx = np.searchsorted(baseline.knots, y[ev])
    sp = np.logaddexp(0.0, eta)
    total = np.sum(eta[ev] - sp[ev] + np.log(jumps[idx]) + lp[ev] - cumhaz[ev])
    total += np.sum(np.logaddexp(0.0, eta[mid] - cumhaz[mid]) - sp[mid])
    total += np.sum(-sp[pl])
    return float(total)


# ---------------------------------------------------------------------------
# observed information


def information_matrix(y, delta, X, Z, alpha0, alpha, beta, baseline):
    """Observed information of ``(alpha0, alpha, beta, baseline jumps)``.

    The baseline cumulative hazard is parameterised by its jumps at the
    distinct event times, so the matrix has ``1 + p + d + m`` rows.
    """
    n = len(y)
    xt = np.column_stack([np.ones(n), X])
    knots = baseline.knots
    h = baseline.jumps
    E = (knots[None, :] <= y[:, None]).astype(float)
    eta = xt @ np.concatenate([[alpha0], alpha])
    r = np.exp(Z @ beta)
    lam = baseline(y) * r
    pi = expit(eta)
    ev = delta == 1
    pl = plateau_mask(y, delta)
    mid = ~ev & ~pl
    w = np.where(mid, expit(eta - lam), 0.0)
    v = w * (1.0 - w)

    c_aa = -pi * (1.0 - pi) + v
    c_ab = -v * lam
    c_ah = -v * r
    c_bb = np.where(ev, -lam, v * lam**2 - w * lam)
    c_bh = np.where(ev, -r, v * lam * r - w * r)
    c_hh = v * r**2
    counts = np.bincount(np.searchsorted(knots, y[ev]), minlength=len(knots))

    haa = (xt * c_aa[:, None]).T @ xt
    hab = (xt * c_ab[:, None]).T @ Z
    hah = (xt * c_ah[:, None]).T @ E
    hbb = (Z * c_bb[:, None]).T @ Z
    hbh = (Z * c_bh[:, None]).T @ E
    hhh = (E * c_hh[:, None]).T @ E - np.diag(counts / h**2)
    hess = np.block([[haa, hab, hah], [hab.T, hbb, hbh], [hah.T, hbh.T, hhh]])
    return -hess


def information_covariance(y, delta, X, Z, fit: CureFit) -> np.ndarray:
    """Covariance of ``(alpha0, alpha, beta)`` from the inverse observed information."""
    info = information_matrix(y, delta, X, Z, fit.alpha0, fit.alpha, fit.beta, fit.baseline)
    k = 1 + len(fit.alpha) + len(fit.beta)
    try:
        cov = np.linalg.inv(info)
    except np.linalg.LinAlgError:
        cov = np.linalg.pinv(info)
    cov = cov[:k, :k]
    return 0.5 * (cov + cov.T)


# ---------------------------------------------------------------------------
# EM


def _initial(y, delta, X, Z):
    ev = delta == 1
    inc = fit_logistic(delta.astype(float), X)
    lat = fit_cox(y[ev], delta[ev], Z[ev])
    base = breslow_cumhaz(y, delta, Z @ lat.coefficients, q=delta.astype(float))
    return inc.intercept, inc.coefficients, lat.coefficients, base


def fit_cure_arrays(y, delta, X, Z, init=None, *, tol=EM_TOL, max_iter=EM_MAX_ITER,
                    covariance=True, names=()) -> CureFit:
    """EM fit on raw arrays; see :func:`fit_cure_em`."""
    y = np.asarray(y, float)
    delta = np.asarray(delta)
    X = np.asarray(X, float).reshape(len(y), -1)
    Z = np.asarray(Z, float).reshape(len(y), -1)
    if not delta.any():
        raise NoEvents("no events")
    if init is None:
        a0, a, b, base = _initial(y, delta, X, Z)
    else:
        a0, a, b, base = init.alpha0, np.array(init.alpha), np.array(init.beta), init.baseline
        base = breslow_cumhaz(y, delta, Z @ b,
                              posterior_uncured(y, delta, X, Z, a0, a, b, base))
    trace = [observed_loglik(y, delta, X, Z, a0, a, b, base)]
    converged = False
    it = 0
    q = None
    for it in range(1, max_iter + 1):
        q = posterior_uncured(y, delta, X, Z, a0, a, b, base)
        inc = fit_logistic(q, X, init=np.concatenate([[a0], a]))
        a0, a = inc.intercept, inc.coefficients
        lat = fit_cox(y, delta, Z, weights=q, init=b)
        b = lat.coefficients
        base = breslow_cumhaz(y, delta, Z @ b, q)
        trace.append(observed_loglik(y, delta, X, Z, a0, a, b, base))
        if abs(trace[-1] - trace[-2]) < tol * abs(trace[-2]):
            converged = True
            break
    q = posterior_uncured(y, delta, X, Z, a0, a, b, base)
    if not converged:
        warnings.warn(f"EM did not converge in {max_iter} iterations", RuntimeWarning, stacklevel=2)
    fit = CureFit(float(a0), np.asarray(a), np.asarray(b), base, q, np.array(trace),
                  converged, it, tuple(names))
    if covariance:
        fit.covariance = information_covariance(y, delta, X, Z, fit)
    return fit


def fit_cure_em(ds: SurvivalDataset, spec: ModelSpec, init: CureFit | None = None, *,
                tol=EM_TOL, max_iter=EM_MAX_ITER, covariance=True) -> CureFit:
    """Fit the mixture cure model by EM on a dataset with complete model columns.

    Each iteration computes the posterior uncured weights, refits the
    incidence by logistic regression with those weights as fractional
    outcomes, refits the latency by a Cox model weighted by them, and updates
    the baseline with the weighted Breslow estimator. Iteration stops when the
    relative change of the observed log-likelihood falls below ``tol``; a fit
    that hits ``max_iter`` is returned with ``converged=False``.

    When ``covariance`` is true the inverse observed information (with the
    baseline jumps as parameters) is attached as ``fit.covariance``.
    """
    y, delta, X, Z = model_arrays(ds, spec)
    return fit_cure_arrays(y, delta, X, Z, init, tol=tol, max_iter=max_iter,
                           covariance=covariance, names=tuple(spec.parameter_names()))


# ---------------------------------------------------------------------------
# bootstrap


def _boot_one(args):
    y, delta, X, Z, seed, key, init = args
    g = rngmod.stream(seed, rngmod.TAG_BOOTSTRAP, key)
    idx = g.integers(0, len(y), len(y))
    try:
        fit = fit_cure_arrays(y[idx], delta[idx], X[idx], Z[idx], init, covariance=False)
    except CureMIError as exc:
        log.debug("bootstrap resample %d failed: %s", key, exc)
        return None
    return fit.params if fit.converged else None


def bootstrap_se(ds, spec, n_boot, seed, *, workers=1, keys=None, init=None):
    """Bootstrap standard errors of ``(alpha0, alpha, beta)``.

    Resample ``r`` draws its indices from the stream keyed by
    ``keys[r]`` (default ``r``). Resamples whose fit fails or does not
    converge are dropped. Returns ``(se, n_failed)``.

    Raises
    ------
    TooManyFailures
        If more than half of the resamples fail.
    """
    if n_boot < 2:
        raise ValueError("n_boot must be at least 2")
    y, delta, X, Z = model_arrays(ds, spec)
    keys = range(n_boot) if keys is None else list(keys)
    jobs = [(y, delta, X, Z, seed, k, init) for k in keys]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        if workers > 1:
            with ProcessPoolExecutor(workers) as ex:
                results = list(ex.map(_boot_one, jobs))
        else:
            results = [_boot_one(j) for j in jobs]
    ok = [r for r in results if r is not None]
    failed = len(results) - len(ok)
    if failed > len(results) / 2 or len(ok) < 2:
        raise TooManyFailures(f"{failed} of {len(results)} bootstrap resamples failed")
    return np.std(np.array(ok), axis=0, ddof=1), failed


# ---------------------------------------------------------------------------
# prediction and reporting


@dataclass
class Prediction:
    cure_probability: float
    baseline: StepFunction
    relative_hazard: float

    def latency_survival(self, t):
        return np.exp(-self.baseline(t) * self.relative_hazard)

    def overall_survival(self, t):
        p = 1.0 - self.cure_probability
        return (1.0 - p) + p * self.latency_survival(t)


def predict(fit: CureFit, x_row, z_row) -> Prediction:
    """Cure probability and survival curves for one covariate profile."""
    eta = fit.alpha0 + np.asarray(x_row, float) @ fit.alpha
    return Prediction(float(1.0 - expit(eta)), fit.baseline,
                      float(np.exp(np.asarray(z_row, float) @ fit.beta)))


def fit_table(fit: CureFit, level=0.95):
    """Rows ``(parameter, estimate, se, ci_lower, ci_upper, se_source)``."""
    if fit.se is not None:
        se, source = fit.se, "bootstrap"
    elif fit.covariance is not None:
        se, source = fit.information_se, "information"
    else:
        se, source = np.full(len(fit.params), np.nan), "none"
    z = norm.ppf(0.5 + level / 2)
    names = fit.names or tuple(f"theta{i}" for i in range(len(fit.params)))
    return [(nm, est, s, est - z * s, est + z * s, source)
            for nm, est, s in zip(names, fit.params, se)]


def write_fit_report(fit: CureFit, path, level=0.95):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["parameter", "estimate", "se", "ci_lower", "ci_upper", "se_source"])
        for nm, est, s, lo, hi, src in fit_table(fit, level):
            w.writerow([nm, format_number(est), format_number(s), format_number(lo),
                        format_number(hi), src])
