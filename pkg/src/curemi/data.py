"""Survival datasets with partially observed covariates.

A :class:`SurvivalDataset` stores follow-up times, event indicators and a
covariate matrix whose missing cells are tracked by a boolean mask. Each
covariate column is described by a :class:`CovariateSpec` (binary or
continuous; incidence, latency, both or auxiliary), and a :class:`ModelSpec`
lists the ordered design columns of the incidence and latency submodels.
"""

from __future__ import annotations

import csv
import dataclasses
import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import yaml

from .errors import (
    CovariateNotBinary,
    MalformedRow,
    NegativeTime,
    NonNumericCell,
    SchemaMismatch,
    SpecColumnUnknown,
    StatusNotBinary,
)

TIME = "time"
STATUS = "status"
MISSING_TOKENS = ("", "na")


class Kind(str, enum.Enum):
    BINARY = "binary"
    CONTINUOUS = "continuous"


class Placement(str, enum.Enum):
    INCIDENCE = "incidence"
    LATENCY = "latency"
    BOTH = "both"
    AUXILIARY = "auxiliary"


@dataclass(frozen=True)
class CovariateSpec:
    name: str
    kind: Kind = Kind.CONTINUOUS
    placement: Placement = Placement.BOTH
    has_missing: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        object.__setattr__(self, "placement", Placement(self.placement))
        if self.name in (TIME, STATUS):
            raise ValueError(f"column name {self.name!r} is reserved")


@dataclass(frozen=True)
class ModelSpec:
    """Ordered design columns of the incidence (X) and latency (Z) models."""

    incidence: tuple[str, ...]
    latency: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "incidence", tuple(self.incidence))
        object.__setattr__(self, "latency", tuple(self.latency))
        for label, cols in (("incidence", self.incidence), ("latency", self.latency)):
            if len(set(cols)) != len(cols):
                raise ValueError(f"duplicate column in {label} list: {cols}")

    @classmethod
    def from_schema(cls, schema: Sequence[CovariateSpec]) -> "ModelSpec":
        inc = [c.name for c in schema if c.placement in (Placement.INCIDENCE, Placement.BOTH)]
        lat = [c.name for c in schema if c.placement in (Placement.LATENCY, Placement.BOTH)]
        return cls(tuple(inc), tuple(lat))

    @property
    def columns(self) -> tuple[str, ...]:
        """Union of incidence and latency columns, incidence order first."""
        out = list(self.incidence)
        out += [c for c in self.latency if c not in self.incidence]
        return tuple(out)

    def placement_of(self, name: str) -> Placement:
        inc, lat = name in self.incidence, name in self.latency
        if inc and lat:
            return Placement.BOTH
        if inc:
            return Placement.INCIDENCE
        if lat:
            return Placement.LATENCY
        return Placement.AUXILIARY

    def parameter_names(self) -> list[str]:
        return (["alpha0"] + [f"alpha_{c}" for c in self.incidence]
                + [f"beta_{c}" for c in self.latency])


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class SurvivalDataset:
    """Right-censored survival data with a masked covariate matrix.

    Missing covariate cells hold ``nan`` in :attr:`covariates` and ``True`` in
    :attr:`missing_mask`. Arrays are read-only; derive new datasets with
    :meth:`with_covariates` or :meth:`subset`.
    """

    y: np.ndarray
    delta: np.ndarray
    covariates: np.ndarray
    columns: tuple[CovariateSpec, ...]
    missing_mask: np.ndarray = None
    names: tuple[str, ...] = field(init=False)

    def __post_init__(self):
        y = _frozen(self.y)
        delta = _frozen(self.delta, dtype=np.int64)
        cov = np.array(self.covariates, dtype=float, copy=True).reshape(len(y), -1)
        if self.missing_mask is None:
            mask = np.isnan(cov)
        else:
            mask = np.array(self.missing_mask, dtype=bool, copy=True).reshape(cov.shape)
        cov[mask] = np.nan
        if np.isnan(cov[~mask]).any():
            raise ValueError("nan covariate value outside the missing mask")
        if len(self.columns) != cov.shape[1]:
            raise SchemaMismatch(f"{cov.shape[1]} covariate columns but {len(self.columns)} specs")
        if len(delta) != len(y):
            raise ValueError("y and delta lengths differ")
        if (y < 0).any():
            raise NegativeTime(f"negative follow-up time at index {int(np.argmax(y < 0))}")
        if not np.isin(delta, (0, 1)).all():
            raise StatusNotBinary("event indicator must be 0/1")
        cols = tuple(dataclasses.replace(c, has_missing=bool(mask[:, j].any()))
                     for j, c in enumerate(self.columns))
        for j, c in enumerate(cols):
            obs = cov[~mask[:, j], j]
            if c.kind is Kind.BINARY and not np.isin(obs, (0.0, 1.0)).all():
                raise CovariateNotBinary(f"column {c.name!r} has values outside {{0,1}}")
        cov.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "delta", delta)
        object.__setattr__(self, "covariates", cov)
        object.__setattr__(self, "missing_mask", mask)
        object.__setattr__(self, "columns", cols)
        object.__setattr__(self, "names", tuple(c.name for c in cols))

    @property
    def n(self) -> int:
        return len(self.y)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise SpecColumnUnknown(f"unknown column {name!r}") from None

    def spec_of(self, name: str) -> CovariateSpec:
        return self.columns[self.index(name)]

    def column(self, name: str) -> np.ndarray:
        return self.covariates[:, self.index(name)]

    def matrix(self, names: Iterable[str]) -> np.ndarray:
        idx = [self.index(c) for c in names]
        return self.covariates[:, idx]

    def missing_in(self, names: Iterable[str]) -> np.ndarray:
        """Row mask of subjects missing at least one of ``names``."""
        idx = [self.index(c) for c in names]
        return self.missing_mask[:, idx].any(axis=1)

    def with_covariates(self, covariates, missing_mask=None) -> "SurvivalDataset":
        return SurvivalDataset(self.y, self.delta, covariates, self.columns, missing_mask)

    def subset(self, rows) -> "SurvivalDataset":
        rows = np.asarray(rows)
        return SurvivalDataset(self.y[rows], self.delta[rows], self.covariates[rows],
                               self.columns, self.missing_mask[rows])


# ---------------------------------------------------------------------------
# schema files


def load_schema(path) -> list[CovariateSpec]:
    """Read a YAML schema file.

    The file holds a ``columns`` list whose entries carry ``name``, ``kind``
    (binary/continuous) and ``placement`` (incidence/latency/both/auxiliary).
    An optional ``model`` mapping with ``incidence`` and ``latency`` lists is
    read by :func:`load_model_spec`.
    """
    doc = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    try:
        return [CovariateSpec(str(c["name"]), Kind(c.get("kind", "continuous")),
                              Placement(c.get("placement", "both")))
                for c in doc["columns"]]
    except (KeyError, TypeError) as exc:
        raise SchemaMismatch(f"malformed schema file {path}: {exc}") from None


def load_model_spec(path, schema: Sequence[CovariateSpec]) -> ModelSpec:
    doc = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    model = doc.get("model")
    if model is None:
        return ModelSpec.from_schema(schema)
    return ModelSpec(tuple(model.get("incidence", ())), tuple(model.get("latency", ())))


def write_schema(path, schema: Sequence[CovariateSpec], model: ModelSpec | None = None):
    doc = {"columns": [{"name": c.name, "kind": c.kind.value, "placement": c.placement.value}
                       for c in schema]}
    if model is not None:
        doc["model"] = {"incidence": list(model.incidence), "latency": list(model.latency)}
    Path(path).write_text(yaml.safe_dump(doc, sort_keys=False), encoding="utf-8")


# ---------------------------------------------------------------------------
# CSV


def _parse(cell: str, line: int, col: str) -> float:
    try:
        v = float(cell)
    except ValueError:
        raise NonNumericCell(f"row {line}, column {col!r}: {cell!r} is not numeric") from None
    if not np.isfinite(v):
        raise NonNumericCell(f"row {line}, column {col!r}: {cell!r} is not finite")
    return v


def load_csv(path, schema: Sequence[CovariateSpec]) -> SurvivalDataset:
    """Load a CSV file with ``time``, ``status`` and the schema's columns.

    Empty cells and ``NA`` (any case) mark missing covariate values. Row
    numbers in error messages are 1-based file line numbers.
    """
    schema = list(schema)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise MalformedRow(f"{path}: empty file") from None
        expected = {TIME, STATUS} | {c.name for c in schema}
        if set(header) != expected or len(header) != len(expected):
            raise SchemaMismatch(f"header {header} does not match schema columns {sorted(expected)}")
        pos = {h: i for i, h in enumerate(header)}
        ys, ds, rows, masks = [], [], [], []
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise MalformedRow(f"row {line}: expected {len(header)} cells, got {len(row)}")
            cells = [r.strip() for r in row]
            for req in (TIME, STATUS):
                if cells[pos[req]].lower() in MISSING_TOKENS:
                    raise NonNumericCell(f"row {line}, column {req!r}: missing value not allowed")
            t = _parse(cells[pos[TIME]], line, TIME)
            if t < 0:
                raise NegativeTime(f"row {line}, column 'time': {t} < 0")
            s = _parse(cells[pos[STATUS]], line, STATUS)
            if s not in (0.0, 1.0):
                raise StatusNotBinary(f"row {line}, column 'status': {cells[pos[STATUS]]!r}")
            vals, miss = [], []
            for c in schema:
                cell = cells[pos[c.name]]
                if cell.lower() in MISSING_TOKENS:
                    vals.append(np.nan)
                    miss.append(True)
                    continue
                v = _parse(cell, line, c.name)
                if c.kind is Kind.BINARY and v not in (0.0, 1.0):
                    raise CovariateNotBinary(f"row {line}, column {c.name!r}: {cell!r} not in {{0,1}}")
                vals.append(v)
                miss.append(False)
            ys.append(t)
            ds.append(int(s))
            rows.append(vals)
            masks.append(miss)
    cov = np.array(rows, dtype=float).reshape(len(ys), len(schema))
    mask = np.array(masks, dtype=bool).reshape(cov.shape)
    return SurvivalDataset(np.array(ys), np.array(ds), cov, tuple(schema), mask)


def format_number(v: float) -> str:
    """Shortest exact text form of a float (integers without a decimal point)."""
    v = float(v)
    if v.is_integer() and abs(v) < 1e15:
        return str(int(v))
    return repr(v)


def write_csv(ds: SurvivalDataset, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([TIME, STATUS, *ds.names])
        for i in range(ds.n):
            cells = ["" if ds.missing_mask[i, j] else format_number(ds.covariates[i, j])
                     for j in range(len(ds.names))]
            w.writerow([format_number(ds.y[i]), str(int(ds.delta[i])), *cells])


# ---------------------------------------------------------------------------
# validation


def last_event_time(y, delta) -> float:
    y, delta = np.asarray(y), np.asarray(delta)
    if not delta.any():
        return -np.inf
    return float(y[delta == 1].max())


def plateau_mask(y, delta) -> np.ndarray:
    """Censored subjects strictly beyond the last event time."""
    y, delta = np.asarray(y), np.asarray(delta)
    return (delta == 0) & (y > last_event_time(y, delta))


@dataclass(frozen=True)
class ValidationReport:
    n: int
    n_events: int
    censoring_rate: float
    plateau_fraction: float
    missing_fraction: dict

    def lines(self) -> list[str]:
        out = [f"subjects: {self.n}", f"events: {self.n_events}",
               f"censoring rate: {self.censoring_rate:.4f}",
               f"plateau fraction: {self.plateau_fraction:.4f}"]
        out += [f"missing[{k}]: {v:.4f}" for k, v in self.missing_fraction.items()]
        return out


def validate(ds: SurvivalDataset, spec: ModelSpec | None = None) -> ValidationReport:
    """Summarise missingness, censoring and the observed plateau."""
    if spec is not None:
        for c in spec.columns:
            if c not in ds.names:
                raise SpecColumnUnknown(f"model column {c!r} not in dataset")
    n = ds.n
    frac = {name: float(ds.missing_mask[:, j].sum()) / n for j, name in enumerate(ds.names)}
    return ValidationReport(
        n=n,
        n_events=int(ds.delta.sum()),
        censoring_rate=float((ds.delta == 0).mean()),
        plateau_fraction=float(plateau_mask(ds.y, ds.delta).mean()),
        missing_fraction=frac,
    )
