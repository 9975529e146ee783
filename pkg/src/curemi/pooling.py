"""Rubin's rules for combining estimates across imputed datasets."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .data import format_number
from .errors import DimensionMismatch


@dataclass
class PooledEstimate:
    estimate: np.ndarray
    within: np.ndarray
    between: np.ndarray
    total: np.ndarray
    ci_lower: np.ndarray
    ci_upper: np.ndarray
    K: int
    names: tuple = ()

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.total))

    @property
    def fmi(self) -> np.ndarray:
        """Share of the total variance attributable to missingness,
        ``(1 + 1/K) B / T`` on the diagonal."""
        t = np.diag(self.total)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(t > 0, (1 + 1 / self.K) * np.diag(self.between) / t, 0.0)


def pool(estimates, covariances, level=0.95, names=()) -> PooledEstimate:
    """Pool K estimate vectors and their covariance matrices.

    The pooled estimate is the mean of the estimates, the within component
    the mean of the covariances, the between component the sample covariance
    of the estimates (divisor K - 1), and the total variance
    ``W + (1 + 1/K) B``. Intervals use the standard normal quantile.
    """
    est = [np.atleast_1d(np.asarray(e, float)) for e in estimates]
    covs = [np.atleast_2d(np.asarray(c, float)) for c in covariances]
    K = len(est)
    if K < 2:
        raise ValueError("pooling needs at least two estimates")
    if len(covs) != K:
        raise DimensionMismatch(f"{K} estimates but {len(covs)} covariance matrices")
    d = est[0].shape[0]
    if any(e.shape != (d,) for e in est) or any(c.shape != (d, d) for c in covs):
        raise DimensionMismatch("estimates and covariances are not conformable")
    E = np.stack(est)
    # centring on the first draw keeps identical inputs at exactly zero spread
    shift = E - E[0]
    mean = E[0] + shift.mean(axis=0)
    within = np.mean(np.stack(covs), axis=0)
    dev = shift - shift.mean(axis=0)
    between = dev.T @ dev / (K - 1)
    total = within + (1 + 1 / K) * between
    z = norm.ppf(0.5 + level / 2)
    se = np.sqrt(np.diag(total))
    return PooledEstimate(mean, within, between, total, mean - z * se, mean + z * se, K,
                          tuple(names))


def pool_fits(fits) -> PooledEstimate:
    """Pool a list of cure fits carrying information-based covariances."""
    return pool([f.params for f in fits], [f.covariance for f in fits], names=fits[0].names)


def write_pooled_report(pe: PooledEstimate, path):
    names = pe.names or tuple(f"theta{i}" for i in range(len(pe.estimate)))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["parameter", "estimate", "se", "ci_lower", "ci_upper", "fmi"])
        for row in zip(names, pe.estimate, pe.se, pe.ci_lower, pe.ci_upper, pe.fmi):
            w.writerow([row[0], *(format_number(v) for v in row[1:])])
