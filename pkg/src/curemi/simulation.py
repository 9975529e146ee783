"""Simulation study: data generation, amputation, replicate analysis, metrics.

Covariates ``W``, ``X``, ``Z`` are drawn through a Gaussian copula with a
common latent correlation; ``X`` and ``Z`` are Bernoulli(0.5) and ``W`` is
either Bernoulli(0.5) or Normal(0.5, 1). Uncured status follows a logistic
model, uncured event times a Weibull proportional-hazards model truncated
to ``[0, event_truncation]``, and censoring an exponential distribution
capped at ``censor_truncation``.
"""

from __future__ import annotations

import csv
import logging
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit

from . import rng as rngmod
from .cure import fit_cure_em
from .data import CovariateSpec, Kind, ModelSpec, SurvivalDataset, format_number
from .errors import CureMIError, TooManyFailures, UnknownScenario
from .imputation import APPROXIMATE, EXACT, ImputationConfig, run_chained_equations
from .pooling import pool_fits

log = logging.getLogger(__name__)

FULL = "full"
COMPLETE_CASE = "complete-case"
METHODS = (FULL, COMPLETE_CASE, EXACT, APPROXIMATE)
MAX_FAILURE_RATE = 0.10


@dataclass(frozen=True)
class ScenarioConfig:
    name: str = "custom"
    n: int = 500
    alpha0: float = 1.0
    alpha_W: float = -1.0
    alpha_X: float = 0.5
    alpha_Z: float = 0.0
    beta_W: float = -0.2
    beta_X: float = 0.0
    beta_Z: float = 0.0
    w_kind: Kind = Kind.BINARY
    correlation: float = 0.5
    weibull_lambda: float = 0.25
    weibull_rho: float = 1.45
    event_truncation: float = 8.0
    censor_rate: float = 0.08
    censor_truncation: float = 10.0
    missing_mech: str = "MCAR"
    missing_frac: float = 0.15
    incidence: tuple = ("W", "X")
    latency: tuple = ("W", "Z")
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "w_kind", Kind(self.w_kind))
        object.__setattr__(self, "incidence", tuple(self.incidence))
        object.__setattr__(self, "latency", tuple(self.latency))
        if not 0 < self.missing_frac < 1:
            raise ValueError("missing_frac must lie in (0, 1)")
        if self.event_truncation <= 0 or self.censor_truncation <= 0:
            raise ValueError("truncation times must be positive")
        if self.missing_mech not in ("MCAR", "MAR"):
            raise ValueError(f"unknown missingness mechanism {self.missing_mech!r}")

    @property
    def model_spec(self) -> ModelSpec:
        return ModelSpec(self.incidence, self.latency)

    def truth(self) -> dict:
        """True value of every parameter of the analysis model."""
        out = {"alpha0": self.alpha0}
        out.update({f"alpha_{c}": getattr(self, f"alpha_{c}") for c in self.incidence})
        out.update({f"beta_{c}": getattr(self, f"beta_{c}") for c in self.latency})
        return out

    def schema(self) -> tuple:
        spec = self.model_spec
        return (CovariateSpec("W", self.w_kind, spec.placement_of("W")),
                CovariateSpec("X", Kind.BINARY, spec.placement_of("X")),
                CovariateSpec("Z", Kind.BINARY, spec.placement_of("Z")))


_SECOND = dict(alpha0=0.1, alpha_W=0.5, alpha_X=0.5, beta_W=0.5, beta_Z=0.5,
               w_kind=Kind.CONTINUOUS, censor_rate=0.1, missing_frac=0.30)


def scenario_presets() -> dict:
    """Scenarios A-F of the simulation design."""
    a = ScenarioConfig(name="A")
    b = ScenarioConfig(name="B", missing_mech="MCAR", **_SECOND)
    c = ScenarioConfig(name="C", missing_mech="MAR", **_SECOND)
    d = replace(c, name="D", incidence=("W", "X", "Z"), latency=("W", "X", "Z"))
    e = replace(c, name="E", beta_W=0.0)
    f = replace(c, name="F", alpha_W=0.0)
    return {s.name: s for s in (a, b, c, d, e, f)}


def get_scenario(name) -> ScenarioConfig:
    presets = scenario_presets()
    try:
        return presets[str(name).upper()]
    except KeyError:
        raise UnknownScenario(f"unknown scenario {name!r}; choose from {sorted(presets)}") from None


# ---------------------------------------------------------------------------
# generation


@dataclass
class Latent:
    G: np.ndarray
    T: np.ndarray
    C: np.ndarray
    correlation: np.ndarray = field(default=None)


def weibull_truncated_times(u, lam, rho, lp, trunc):
    """Inverse-transform draws from the Weibull PH law truncated to ``[0, trunc]``."""
    scale = lam * np.exp(lp)
    f_max = -np.expm1(-scale * trunc**rho)
    return (-np.log1p(-u * f_max) / scale) ** (1.0 / rho)


def generate_replicate(cfg: ScenarioConfig, rng):
    """Draw one complete dataset; returns ``(dataset, latent)``."""
    n = cfg.n
    R = np.full((3, 3), cfg.correlation)
    np.fill_diagonal(R, 1.0)
    lat = rng.multivariate_normal(np.zeros(3), R, size=n, method="cholesky")
    if cfg.w_kind is Kind.BINARY:
        W = (lat[:, 0] > 0).astype(float)
    else:
        W = 0.5 + lat[:, 0]
    X = (lat[:, 1] > 0).astype(float)
    Z = (lat[:, 2] > 0).astype(float)
    eta = cfg.alpha0 + cfg.alpha_W * W + cfg.alpha_X * X + cfg.alpha_Z * Z
    G = (rng.random(n) < expit(eta)).astype(int)
    lp = cfg.beta_W * W + cfg.beta_X * X + cfg.beta_Z * Z
    T = weibull_truncated_times(rng.random(n), cfg.weibull_lambda, cfg.weibull_rho, lp,
                                cfg.event_truncation)
    T = np.where(G == 1, T, 10.0 * cfg.censor_truncation)
    C = np.minimum(rng.exponential(1.0 / cfg.censor_rate, n), cfg.censor_truncation)
    y = np.minimum(T, C)
    delta = (T < C).astype(int)
    cov = np.column_stack([W, X, Z])
    ds = SurvivalDataset(y, delta, cov, cfg.schema())
    return ds, Latent(G, T, C, np.corrcoef(cov, rowvar=False))


def _standardize(v):
    sd = v.std()
    return (v - v.mean()) / sd if sd > 0 else np.zeros_like(v)


def mar_intercept(score, frac):
    """Intercept ``b`` with ``mean(expit(b + score)) == frac``, by bisection."""
    return brentq(lambda b: expit(b + score).mean() - frac, -60.0, 60.0, xtol=1e-14)


def ampute(ds: SurvivalDataset, mech, frac, rng, *, column="W", weights=None):
    """Mask cells of ``column`` under MCAR or MAR.

    MCAR masks each cell independently with probability ``frac``. MAR masks
    with probability ``expit(b + s_i)`` where ``s_i`` is a weighted sum of the
    standardized other covariates, follow-up time and censoring indicator
    ``1 - delta`` (unit weights by default) and ``b`` is calibrated so the
    expected masked fraction equals ``frac``.

    Scoring the censoring indicator rather than the event indicator matters:
    with unit weights on the event indicator, long follow-up and events pull
    the score in opposite directions and largely cancel, so a complete-case
    analysis ends up nearly unbiased.
    """
    if not 0 < frac < 1:
        raise ValueError("frac must lie in (0, 1)")
    j = ds.index(column)
    if mech == "MCAR":
        p = np.full(ds.n, float(frac))
    elif mech == "MAR":
        others = [c for c in ds.names if c != column]
        inputs = [ds.column(c) for c in others] + [ds.y, 1.0 - ds.delta]
        w = np.ones(len(inputs)) if weights is None else np.asarray(weights, float)
        if len(w) != len(inputs):
            raise ValueError(f"expected {len(inputs)} MAR weights, got {len(w)}")
        score = sum(wk * _standardize(v) for wk, v in zip(w, inputs))
        p = expit(mar_intercept(score, frac) + score)
    else:
        raise ValueError(f"unknown mechanism {mech!r}")
    mask = ds.missing_mask.copy()
    mask[:, j] |= rng.random(ds.n) < p
    return ds.with_covariates(ds.covariates, mask)


def simulate(cfg: ScenarioConfig, replicate=0):
    """Generate and ampute replicate ``replicate`` of ``cfg``."""
    full, latent = generate_replicate(cfg, rngmod.stream(cfg.seed, replicate, rngmod.TAG_GENERATE))
    amp = ampute(full, cfg.missing_mech, cfg.missing_frac,
                 rngmod.stream(cfg.seed, replicate, rngmod.TAG_AMPUTE))
    return full, amp, latent


# ---------------------------------------------------------------------------
# study


@dataclass
class StudyMetrics:
    scenario: str
    B: int
    rows: list  # dicts: method, parameter, truth, mse, bias, variance, ci_width, coverage, n
    failures: dict

    def get(self, method, parameter, metric):
        for r in self.rows:
            if r["method"] == method and r["parameter"] == parameter:
                return r[metric]
        raise KeyError((method, parameter))


@dataclass
class StudyResult:
    config: ScenarioConfig
    B: int
    methods: tuple
    records: list  # dicts: scenario, method, parameter, replicate, estimate, se, ci_lo, ci_hi
    metrics: StudyMetrics


def analyse_replicate(cfg: ScenarioConfig, r: int, methods, imputation: ImputationConfig):
    """Run every requested method on replicate ``r``.

    Returns ``(records, failures)`` where ``failures`` maps method to an
    error string.
    """
    full, amp, _ = simulate(cfg, r)
    spec = cfg.model_spec
    records, failures = [], {}
    for method in methods:
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                if method == FULL:
                    fit = fit_cure_em(full, spec)
                    est, se = fit.params, fit.information_se
                elif method == COMPLETE_CASE:
                    fit = fit_cure_em(amp.subset(~amp.missing_in(spec.columns)), spec)
                    est, se = fit.params, fit.information_se
                else:
                    icfg = replace(imputation, method=method,
                                   seed=rngmod.derive_seed(cfg.seed, r, rngmod.TAG_IMPUTE))
                    run = run_chained_equations(amp, spec, icfg)
                    pe = pool_fits([fit_cure_em(d, spec) for d in run.datasets])
                    est, se = pe.estimate, pe.se
        except (CureMIError, np.linalg.LinAlgError) as exc:
            failures[method] = f"{type(exc).__name__}: {exc}"
            continue
        if not np.all(np.isfinite(se)):
            failures[method] = "non-finite standard error"
            continue
        for name, e, s in zip(spec.parameter_names(), est, se):
            records.append(dict(scenario=cfg.name, method=method, parameter=name, replicate=r,
                                estimate=float(e), se=float(s),
                                ci_lo=float(e - 1.959963984540054 * s),
                                ci_hi=float(e + 1.959963984540054 * s)))
    return records, failures


def _replicate_job(args):
    return analyse_replicate(*args)


def summarize(cfg: ScenarioConfig, records, methods, B, failures) -> StudyMetrics:
    """MSE, bias, variance, mean CI width and coverage per method and parameter."""
    truth = cfg.truth()
    rows = []
    for method in methods:
        for name, t in truth.items():
            rs = [r for r in records if r["method"] == method and r["parameter"] == name]
            if not rs:
                continue
            est = np.array([r["estimate"] for r in rs])
            lo = np.array([r["ci_lo"] for r in rs])
            hi = np.array([r["ci_hi"] for r in rs])
            err = est - t
            rows.append(dict(method=method, parameter=name, truth=t,
                             mse=float(np.mean(err**2)), bias=float(err.mean()),
                             variance=float(est.var()), ci_width=float(np.mean(hi - lo)),
                             coverage=float(np.mean((lo <= t) & (t <= hi))), n=len(rs)))
    return StudyMetrics(cfg.name, B, rows, failures)


def run_study(cfg: ScenarioConfig, B: int, methods=METHODS, imputation=None, *,
              workers=1, progress=None) -> StudyResult:
    """Run ``B`` replicates of ``cfg`` for each method and aggregate metrics.

    Replicate ``r`` draws from streams keyed by ``(cfg.seed, r)``, so the
    result does not depend on ``workers``. Failed (replicate, method) pairs
    are excluded from the metrics and counted; more than 10% failures for a
    method raises :class:`TooManyFailures`.
    """
    if B < 1:
        raise ValueError("B must be at least 1")
    methods = tuple(methods)
    for m in methods:
        if m not in METHODS:
            raise ValueError(f"unknown method {m!r}")
    imputation = imputation or ImputationConfig()
    jobs = [(cfg, r, methods, imputation) for r in range(B)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            results = list(ex.map(_replicate_job, jobs, chunksize=1))
    else:
        results = []
        for j in jobs:
            results.append(_replicate_job(j))
            if progress is not None:
                progress(len(results), B)
    records, failures = [], {m: 0 for m in methods}
    for r, (recs, fails) in enumerate(results):
        records += recs
        for m, msg in fails.items():
            failures[m] += 1
            log.warning("replicate %d, method %s failed: %s", r, m, msg)
    for m, k in failures.items():
        if k > MAX_FAILURE_RATE * B:
            raise TooManyFailures(f"method {m}: {k} of {B} replicates failed")
    return StudyResult(cfg, B, methods, records, summarize(cfg, records, methods, B, failures))


LONG_COLUMNS = ("scenario", "method", "parameter", "replicate", "estimate", "se", "ci_lo", "ci_hi")
METRIC_COLUMNS = ("scenario", "method", "parameter", "truth", "mse", "ci_width", "coverage",
                  "bias", "variance", "n")


def write_study(result: StudyResult, long_path, metrics_path):
    with open(long_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LONG_COLUMNS)
        for rec in result.records:
            w.writerow([rec[c] if isinstance(rec[c], str) else format_number(rec[c])
                        for c in LONG_COLUMNS])
    with open(metrics_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for row in result.metrics.rows:
            row = dict(row, scenario=result.metrics.scenario)
            w.writerow([row[c] if isinstance(row[c], str) else format_number(row[c])
                        for c in METRIC_COLUMNS])


def config_dict(cfg: ScenarioConfig) -> dict:
    d = asdict(cfg)
    d["w_kind"] = cfg.w_kind.value
    d["incidence"] = list(cfg.incidence)
    d["latency"] = list(cfg.latency)
    return d
