"""Sufficient follow-up check.

Compares the gap between the largest observed time and the largest event
time against the length of follow-up: the interval criterion holds when
``2 (Y_(n) - Y~_(m)) < Y_(n)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import SurvivalDataset
from .errors import NoEvents


@dataclass(frozen=True)
class FollowupCheck:
    y_max: float
    last_event: float
    statistic: float
    reject: bool
    n: int
    stratum: str = "all"
    p_value: float | None = None  # needs an external estimator; never computed here

    def report(self) -> str:
        verdict = "fails" if self.reject else "passes"
        return (f"stratum {self.stratum}: n={self.n}, Y(n)={self.y_max:g}, "
                f"last event={self.last_event:g}, 2*(Y(n)-last event)={self.statistic:g}; "
                f"interval criterion {verdict}; p-value unavailable")

    def as_row(self) -> dict:
        return {"stratum": self.stratum, "n": self.n, "y_max": self.y_max,
                "last_event": self.last_event, "statistic": self.statistic,
                "reject": self.reject, "p_value": None}


def followup_interval_check(ds: SurvivalDataset, stratum=None) -> FollowupCheck:
    """Interval check of sufficient follow-up, optionally within a stratum.

    ``stratum`` is ``None`` or a ``(column, level)`` pair selecting the
    subjects whose covariate equals ``level``.
    """
    y, delta = ds.y, ds.delta
    label = "all"
    if stratum is not None:
        col, level = stratum
        j = ds.index(col)
        sel = ~ds.missing_mask[:, j] & (ds.covariates[:, j] == float(level))
        y, delta = y[sel], delta[sel]
        label = f"{col}={level:g}" if isinstance(level, (int, float)) else f"{col}={level}"
    if not np.any(delta == 1):
        raise NoEvents(f"no events in stratum {label}")
    y_max = float(y.max())
    last = float(y[delta == 1].max())
    stat = 2.0 * (y_max - last)
    return FollowupCheck(y_max, last, stat, bool(stat >= y_max), int(len(y)), label)
