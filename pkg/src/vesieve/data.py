"""Dataset container, CSV round trip, and validation for stratified
competing-risks data with possibly missing failure causes.

A record is (x, delta, r, v, stratum, z, a): observed time, failure
indicator, cause-known indicator, failure cause (when known), stratum,
covariate vector (treatment arm first), and an optional auxiliary mark.
Censored records always have r = 1 (there is no cause to be missing).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

#: Fitted completeness probabilities below this trigger a validation warning
#: (near-positivity failure); distinct from the hard floor used in weighting.
POSITIVITY_WARN = 0.01


@dataclass(frozen=True)
class SubjectRecord:
    """One subject, in original (unmapped) stratum/cause labels."""

    x: float
    delta: int
    r: int
    v: int | None
    stratum: int
    z: tuple
    a: float | None = None


@dataclass
class Schema:
    """Column names used by load_dataset / write_dataset."""

    time: str = "time"
    event: str = "event"
    cause: str = "cause"
    cause_known: str = "cause_known"
    stratum: str = "stratum"
    mark: str = "mark"
    covariates: tuple = ("z1", "z2")


@dataclass
class AnalysisDataset:
    """Column-oriented dataset with contiguous stratum/cause codes.

    v uses 0 for "not observed"; a uses NaN for "absent". Strata are coded
    1..n_strata and causes 1..n_causes; the original labels are kept in
    stratum_labels / cause_labels (position i maps code i+1 to its label).
    """

    x: np.ndarray
    delta: np.ndarray
    r: np.ndarray
    v: np.ndarray
    stratum: np.ndarray
    z: np.ndarray
    a: np.ndarray
    covariate_names: tuple
    tau: float
    n_causes: int
    n_strata: int
    stratum_labels: tuple = ()
    cause_labels: tuple = ()
    _stratum_rows: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.x = np.ascontiguousarray(self.x, dtype=np.float64)
        self.delta = np.ascontiguousarray(self.delta, dtype=np.int64)
        self.r = np.ascontiguousarray(self.r, dtype=np.int64)
        self.v = np.ascontiguousarray(self.v, dtype=np.int64)
        self.stratum = np.ascontiguousarray(self.stratum, dtype=np.int64)
        self.z = np.ascontiguousarray(self.z, dtype=np.float64)
        self.a = np.ascontiguousarray(self.a, dtype=np.float64)
        if not self.stratum_labels:
            self.stratum_labels = tuple(range(1, self.n_strata + 1))
        if not self.cause_labels:
            self.cause_labels = tuple(range(1, self.n_causes + 1))
        _check_invariants(self)

    @property
    def n(self):
        return len(self.x)

    @property
    def n_covariates(self):
        return self.z.shape[1]

    def stratum_rows(self, k):
        """Row indices of stratum k (1-based code), cached."""
        if k not in self._stratum_rows:
            self._stratum_rows[k] = np.flatnonzero(self.stratum == k)
        return self._stratum_rows[k]

    def records(self):
        for i in range(self.n):
            yield SubjectRecord(
                x=float(self.x[i]),
                delta=int(self.delta[i]),
                r=int(self.r[i]),
                v=self.cause_labels[self.v[i] - 1] if self.v[i] > 0 else None,
                stratum=self.stratum_labels[self.stratum[i] - 1],
                z=tuple(self.z[i]),
                a=float(self.a[i]) if math.isfinite(self.a[i]) else None,
            )

    @classmethod
    def from_records(cls, records, covariate_names, tau=None):
        records = list(records)
        if not records:
            raise DataError("dataset is empty")
        x = np.array([rec.x for rec in records], dtype=float)
        delta = np.array([rec.delta for rec in records], dtype=int)
        r = np.array([rec.r for rec in records], dtype=int)
        z = np.array([rec.z for rec in records], dtype=float)
        a = np.array(
            [rec.a if rec.a is not None else np.nan for rec in records], dtype=float
        )
        raw_strata = [rec.stratum for rec in records]
        raw_causes = [rec.v for rec in records]
        return _assemble(
            x, delta, r, raw_causes, raw_strata, z, a, tuple(covariate_names), tau
        )


def _label_sort_key(label):
    try:
        return (0, float(label), "")
    except (TypeError, ValueError):
        return (1, 0.0, str(label))


def _assemble(x, delta, r, raw_causes, raw_strata, z, a, covariate_names, tau):
    """Remap labels to contiguous codes and build the dataset."""
    stratum_labels = tuple(sorted(set(raw_strata), key=_label_sort_key))
    stratum_code = {lab: i + 1 for i, lab in enumerate(stratum_labels)}
    stratum = np.array([stratum_code[s] for s in raw_strata], dtype=int)

    cause_labels = tuple(
        sorted({c for c in raw_causes if c is not None}, key=_label_sort_key)
    )
    if not cause_labels:
        raise DataError("no observed failure causes in the dataset")
    cause_code = {lab: i + 1 for i, lab in enumerate(cause_labels)}
    v = np.array([cause_code[c] if c is not None else 0 for c in raw_causes], dtype=int)

    if tau is None:
        tau = float(np.max(x)) if len(x) else 0.0
    return AnalysisDataset(
        x=x,
        delta=delta,
        r=r,
        v=v,
        stratum=stratum,
        z=z,
        a=a,
        covariate_names=tuple(covariate_names),
        tau=float(tau),
        n_causes=len(cause_labels),
        n_strata=len(stratum_labels),
        stratum_labels=stratum_labels,
        cause_labels=cause_labels,
    )


def _check_invariants(ds):
    n = len(ds.x)
    for name, arr in (
        ("event indicator", ds.delta),
        ("cause-known indicator", ds.r),
        ("cause code", ds.v),
        ("stratum code", ds.stratum),
    ):
        if len(arr) != n:
            raise DataError(f"{name} length {len(arr)} != {n}")
    if ds.z.shape != (n, len(ds.covariate_names)):
        raise DataError(
            f"covariate matrix shape {ds.z.shape} does not match "
            f"{n} records x {len(ds.covariate_names)} names"
        )
    if len(ds.a) != n:
        raise DataError("auxiliary mark length mismatch")
    if not np.all(np.isfinite(ds.x)):
        raise DataError("non-finite observed times")
    if np.any(ds.x < 0):
        raise DataError("negative observed times")
    if ds.tau <= 0 or not math.isfinite(ds.tau):
        raise DataError(f"invalid horizon tau={ds.tau}")
    if np.any(ds.x > ds.tau * (1 + 1e-12)):
        raise DataError("observed times exceed the horizon tau")
    if not np.all(np.isin(ds.delta, (0, 1))):
        raise DataError("event indicator must be 0/1")
    if not np.all(np.isin(ds.r, (0, 1))):
        raise DataError("cause-known indicator must be 0/1")
    if np.any((ds.delta == 0) & (ds.r == 0)):
        raise DataError("censored records must have cause_known = 1")
    if np.any((ds.r == 0) & (ds.v != 0)):
        raise DataError("records with cause_known = 0 cannot carry a cause")
    bad = (ds.delta == 1) & (ds.r == 1) & ((ds.v < 1) | (ds.v > ds.n_causes))
    if np.any(bad):
        raise DataError("complete failures must carry a cause in 1..n_causes")
    if np.any((ds.delta == 0) & (ds.v != 0)):
        raise DataError("censored records cannot carry a cause")
    if not np.all(np.isfinite(ds.z)):
        raise DataError("non-finite covariate values")
    if not np.all(np.isin(ds.z[:, 0], (0.0, 1.0))):
        raise DataError("first covariate must be the 0/1 treatment indicator")
    if ds.n_strata < 1 or np.any(ds.stratum < 1) or np.any(ds.stratum > ds.n_strata):
        raise DataError("stratum codes must lie in 1..n_strata")
    for k in range(1, ds.n_strata + 1):
        if not np.any(ds.stratum == k):
            raise DataError(f"stratum {k} has no records")


@dataclass
class ValidationReport:
    n: int
    n_strata: int
    n_causes: int
    stratum_sizes: dict
    censoring_rate: float
    missing_cause_rate: float
    complete_event_counts: dict
    warnings: list
    min_completeness_prob: float | None = None
    floored_weight_count: int = 0

    @property
    def ok(self):
        return not self.warnings


def validate(ds, completeness=None):
    """Structural checks beyond the hard invariants; returns a report.

    Warnings flag (stratum, cause) cells with no complete events, constant
    covariate columns within a stratum, and near-positivity failures when a
    fitted completeness model is supplied.
    """
    warnings = []
    counts = {}
    for k in range(1, ds.n_strata + 1):
        rows = ds.stratum_rows(k)
        for j in range(1, ds.n_causes + 1):
            cnt = int(
                np.sum((ds.delta[rows] == 1) & (ds.r[rows] == 1) & (ds.v[rows] == j))
            )
            counts[(k, j)] = cnt
            if cnt == 0:
                warnings.append(
                    f"cause {ds.cause_labels[j - 1]} has no complete events in "
                    f"stratum {ds.stratum_labels[k - 1]}; per-stratum cause model "
                    "is unidentified there"
                )
        for col, name in enumerate(ds.covariate_names):
            if np.ptp(ds.z[rows, col]) == 0.0:
                warnings.append(
                    f"covariate {name} is constant within stratum "
                    f"{ds.stratum_labels[k - 1]}"
                )

    n_fail = int(np.sum(ds.delta == 1))
    missing_rate = (
        float(np.sum((ds.delta == 1) & (ds.r == 0)) / n_fail) if n_fail else 0.0
    )
    report = ValidationReport(
        n=ds.n,
        n_strata=ds.n_strata,
        n_causes=ds.n_causes,
        stratum_sizes={k: len(ds.stratum_rows(k)) for k in range(1, ds.n_strata + 1)},
        censoring_rate=float(np.mean(ds.delta == 0)),
        missing_cause_rate=missing_rate,
        complete_event_counts=counts,
        warnings=warnings,
    )

    if completeness is not None:
        from .missingness import completeness_probabilities

        pi, raw, floored = completeness_probabilities(ds, completeness)
        fail_rows = ds.delta == 1
        if np.any(fail_rows):
            mn = float(np.min(raw[fail_rows]))
            report.min_completeness_prob = mn
            report.floored_weight_count = int(floored)
            if mn < POSITIVITY_WARN:
                warnings.append(
                    f"minimum fitted completeness probability {mn:.3g} is below "
                    f"{POSITIVITY_WARN}; inverse weights may be unstable"
                )
    return report


def load_dataset(path, schema=None, covariates=None, tau=None):
    """Read a CSV file into an AnalysisDataset.

    Required columns: time, event, stratum, and the covariates. Optional:
    cause (empty cell = unobserved), cause_known (derived from cause when
    absent), mark (empty = absent). Column names come from ``schema``;
    ``covariates`` overrides the schema's covariate list.
    """
    schema = schema or Schema()
    if covariates is not None:
        schema.covariates = tuple(covariates)
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise DataError(f"cannot open data file: {exc}") from exc
    with fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataError(f"{path}: empty file")
        cols = set(reader.fieldnames)
        required = [schema.time, schema.event, schema.stratum, *schema.covariates]
        missing = [c for c in required if c not in cols]
        if missing:
            raise DataError(f"{path}: missing required columns {missing}")
        has_cause = schema.cause in cols
        has_known = schema.cause_known in cols
        has_mark = schema.mark in cols

        x, delta, r, causes, strata, zrows, marks = [], [], [], [], [], [], []
        for ln, row in enumerate(reader, start=2):
            try:
                x.append(float(row[schema.time]))
                delta.append(int(row[schema.event]))
                zrows.append([float(row[c]) for c in schema.covariates])
            except (TypeError, ValueError) as exc:
                raise DataError(f"{path}:{ln}: bad numeric value ({exc})") from exc
            strata.append(row[schema.stratum].strip())
            cause_txt = (row.get(schema.cause) or "").strip() if has_cause else ""
            causes.append(_parse_label(cause_txt) if cause_txt else None)
            if has_known:
                try:
                    r.append(int(row[schema.cause_known]))
                except (TypeError, ValueError) as exc:
                    raise DataError(f"{path}:{ln}: bad cause_known ({exc})") from exc
            else:
                r.append(1 if (cause_txt or delta[-1] == 0) else 0)
            mark_txt = (row.get(schema.mark) or "").strip() if has_mark else ""
            marks.append(float(mark_txt) if mark_txt else np.nan)

    if not x:
        raise DataError(f"{path}: no data rows")
    return _assemble(
        np.array(x),
        np.array(delta),
        np.array(r),
        causes,
        strata,
        np.array(zrows),
        np.array(marks),
        tuple(schema.covariates),
        tau,
    )


def _parse_label(txt):
    try:
        f = float(txt)
        if f.is_integer():
            return int(f)
        return f
    except ValueError:
        return txt


def write_dataset(ds, path, schema=None):
    """Write the dataset as CSV (inverse of load_dataset up to formatting)."""
    schema = schema or Schema()
    schema.covariates = ds.covariate_names
    header = [
        schema.stratum,
        schema.time,
        schema.event,
        schema.cause_known,
        schema.cause,
        schema.mark,
        *ds.covariate_names,
    ]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(ds.n):
            cause = ds.cause_labels[ds.v[i] - 1] if ds.v[i] > 0 else ""
            mark = repr(float(ds.a[i])) if math.isfinite(ds.a[i]) else ""
            writer.writerow(
                [
                    ds.stratum_labels[ds.stratum[i] - 1],
                    repr(float(ds.x[i])),
                    int(ds.delta[i]),
                    int(ds.r[i]),
                    cause,
                    mark,
                    *[repr(float(val)) for val in ds.z[i]],
                ]
            )
