"""Trial-style datasets: loading, validation and preprocessing.

A :class:`Dataset` holds covariates ``X`` (n x p), a treatment vector ``A``
and outcomes ``Y``.  Discrete treatments are stored as integer labels
``1..L`` together with the treatment probabilities ``pi``; continuous
treatments are stored as floats and carry no ``pi``.
"""

from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .exceptions import DataValidationError, ParseError, SchemaError

__all__ = [
    "ColumnSchema",
    "Dataset",
    "PreprocessReport",
    "center_outcome",
    "center_outcome_by_treatment",
    "estimate_treatment_probs",
    "inverse_preprocess",
    "load_csv",
    "make_dataset",
    "preprocess",
    "standardize_covariates",
]


def _frozen(arr, dtype=float):
    out = np.array(arr, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class Dataset:
    """Immutable container for one trial-style dataset.

    Use :func:`make_dataset` to build one; it validates every invariant.
    """

    X: np.ndarray
    A: np.ndarray
    Y: np.ndarray
    discrete: bool = True
    pi: Optional[np.ndarray] = None
    covariate_names: tuple = ()
    label_map: dict = field(default_factory=dict)
    pi_source: str = "empirical"
    standardized: bool = False
    outcome_centered: bool = False

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def n_levels(self) -> int:
        if not self.discrete:
            raise DataValidationError("continuous treatment has no levels")
        return len(self.pi)

    def replace(self, **changes) -> "Dataset":
        return make_dataset(**{**self._fields(), **changes})

    def subset(self, rows) -> "Dataset":
        """Row subset; ``pi`` is re-estimated unless it was supplied."""
        rows = np.asarray(rows)
        fields = self._fields()
        fields.update(X=self.X[rows], A=self.A[rows], Y=self.Y[rows])
        if self.discrete and self.pi_source == "empirical":
            fields["pi"] = None
        return make_dataset(**fields)

    def _fields(self) -> dict:
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}


def make_dataset(
    X,
    A,
    Y,
    discrete: bool = True,
    pi=None,
    covariate_names: Sequence[str] = (),
    label_map: Optional[dict] = None,
    pi_source: Optional[str] = None,
    standardized: bool = False,
    outcome_centered: bool = False,
) -> Dataset:
    """Validate raw arrays and wrap them into a :class:`Dataset`.

    Parameters
    ----------
    X : array-like of shape (n, p)
    A : array-like of shape (n,)
        Integer labels ``1..L`` when ``discrete`` is true, reals otherwise.
    Y : array-like of shape (n,)
    pi : array-like of shape (L,), optional
        Known randomization probabilities.  Estimated as ``n_a / n`` when
        omitted.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2:
        raise DataValidationError("X must be a 2-D array")
    Y = np.asarray(Y, dtype=float).ravel()
    A = np.asarray(A).ravel()
    n, p = X.shape
    if n == 0:
        raise DataValidationError("empty dataset")
    if n < 2:
        raise DataValidationError(f"need at least 2 observations, got {n}")
    if p < 1:
        raise DataValidationError("need at least one covariate")
    if Y.shape[0] != n or A.shape[0] != n:
        raise DataValidationError(
            f"row mismatch: X has {n} rows, A has {A.shape[0]}, Y has {Y.shape[0]}"
        )
    if not np.all(np.isfinite(X)):
        raise DataValidationError("X contains non-finite values")
    if not np.all(np.isfinite(Y)):
        raise DataValidationError("Y contains non-finite values")

    if discrete:
        A = _validate_labels(A)
        L = int(A.max())
        if pi is None:
            pi = np.bincount(A, minlength=L + 1)[1:] / n
            source = "empirical"
        else:
            pi = _validate_probs(pi, L)
            source = "supplied"
        if pi_source is not None:
            source = pi_source
        A = _frozen(A, dtype=int)
        pi = _frozen(pi)
    else:
        A = np.asarray(A, dtype=float)
        if not np.all(np.isfinite(A)):
            raise DataValidationError("A contains non-finite values")
        A = _frozen(A)
        pi = None
        source = "none"

    names = tuple(covariate_names) if covariate_names else tuple(f"x{j + 1}" for j in range(p))
    if len(names) != p:
        raise DataValidationError("covariate_names length does not match p")
    return Dataset(
        X=_frozen(X),
        A=A,
        Y=_frozen(Y),
        discrete=bool(discrete),
        pi=pi,
        covariate_names=names,
        label_map=dict(label_map or {}),
        pi_source=source,
        standardized=standardized,
        outcome_centered=outcome_centered,
    )


def _validate_labels(A) -> np.ndarray:
    try:
        Af = np.asarray(A, dtype=float)
    except (TypeError, ValueError):
        raise DataValidationError("discrete treatment labels must be integers 1..L")
    if not np.all(np.isfinite(Af)) or np.any(Af != np.round(Af)):
        raise DataValidationError("discrete treatment labels must be integers 1..L")
    Ai = Af.astype(int)
    present = np.unique(Ai)
    if present[0] < 1 or not np.array_equal(present, np.arange(1, present[-1] + 1)):
        raise DataValidationError("treatment labels must be contiguous 1..L")
    if present.size < 2:
        raise DataValidationError("need at least two treatment levels")
    return Ai


def _validate_probs(pi, L: int) -> np.ndarray:
    pi = np.asarray(pi, dtype=float).ravel()
    if pi.shape[0] != L:
        raise DataValidationError(f"pi has length {pi.shape[0]}, expected L={L}")
    if np.any(~np.isfinite(pi)) or np.any(pi <= 0):
        raise DataValidationError("treatment probabilities must be positive")
    if abs(pi.sum() - 1.0) > 1e-8:
        raise DataValidationError(f"treatment probabilities sum to {pi.sum()}, not 1")
    return pi / pi.sum()


# ---------------------------------------------------------------------------
# CSV loading
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ColumnSchema:
    """Which CSV columns play which role."""

    outcome: str
    treatment: str
    covariates: Sequence[str]
    treatment_kind: str = "discrete"

    def __post_init__(self):
        if self.treatment_kind not in ("discrete", "continuous"):
            raise SchemaError(f"unknown treatment kind {self.treatment_kind!r}")
        if len(self.covariates) < 1:
            raise SchemaError("schema needs at least one covariate column")


def load_csv(path, schema: ColumnSchema, pi=None) -> Dataset:
    """Read a CSV file into a raw (unpreprocessed) :class:`Dataset`.

    Discrete labels that are all integers must already be contiguous
    ``1..L``.  Any other labels are mapped to ``1..L`` in order of first
    appearance; the mapping is kept in ``Dataset.label_map``.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataValidationError("empty dataset")
        rows = [r for r in reader if any(c.strip() for c in r)]

    index = {name: j for j, name in enumerate(header)}
    wanted = [schema.outcome, schema.treatment, *schema.covariates]
    for name in wanted:
        if name not in index:
            raise SchemaError(f"missing column {name!r}")
    if not rows:
        raise DataValidationError("empty dataset")

    def number(row_no, name, text):
        try:
            value = float(text)
        except ValueError:
            raise ParseError(f"row {row_no}: column {name!r} is not numeric: {text!r}")
        if not np.isfinite(value):
            raise ParseError(f"row {row_no}: column {name!r} is not finite: {text!r}")
        return value

    X = np.empty((len(rows), len(schema.covariates)))
    Y = np.empty(len(rows))
    raw_labels = []
    for i, row in enumerate(rows):
        row_no = i + 1
        if len(row) != len(header):
            raise ParseError(f"row {row_no}: expected {len(header)} fields, got {len(row)}")
        Y[i] = number(row_no, schema.outcome, row[index[schema.outcome]])
        for j, name in enumerate(schema.covariates):
            X[i, j] = number(row_no, name, row[index[name]])
        raw_labels.append(row[index[schema.treatment]].strip())

    label_map = {}
    if schema.treatment_kind == "continuous":
        A = np.array([number(i + 1, schema.treatment, t) for i, t in enumerate(raw_labels)])
    else:
        try:
            A = np.array([float(t) for t in raw_labels])
            integer = bool(np.all(A == np.round(A)))
        except ValueError:
            integer = False
        if not integer:
            for t in raw_labels:
                label_map.setdefault(t, len(label_map) + 1)
            A = np.array([label_map[t] for t in raw_labels])
    return make_dataset(
        X, A, Y,
        discrete=schema.treatment_kind == "discrete",
        pi=pi,
        covariate_names=schema.covariates,
        label_map=label_map,
    )


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------

@dataclass
class PreprocessReport:
    """Shifts and scales removed by preprocessing, enough to undo it."""

    x_mean: Optional[np.ndarray] = None
    x_scale: Optional[np.ndarray] = None
    y_shift: Optional[np.ndarray] = None
    pi: Optional[np.ndarray] = None

    def merge(self, other: "PreprocessReport") -> "PreprocessReport":
        out = {}
        for f in dataclasses.fields(self):
            mine, theirs = getattr(self, f.name), getattr(other, f.name)
            out[f.name] = theirs if theirs is not None else mine
        return PreprocessReport(**out)

    def to_dict(self) -> dict:
        return {
            f.name: None if getattr(self, f.name) is None else np.asarray(getattr(self, f.name)).tolist()
            for f in dataclasses.fields(self)
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "PreprocessReport":
        return cls(**{k: None if v is None else np.asarray(v, dtype=float) for k, v in d.items()})

    def transform_X(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if self.x_mean is None:
            return X
        return (X - self.x_mean) / self.x_scale


def standardize_covariates(ds: Dataset):
    """Center each covariate and scale it to unit sample variance (n - 1 divisor)."""
    mean = ds.X.mean(axis=0)
    scale = ds.X.std(axis=0, ddof=1)
    bad = np.flatnonzero(scale <= 1e-12 * np.maximum(1.0, np.abs(mean)))
    if bad.size:
        raise DataValidationError(f"zero-variance covariate {ds.covariate_names[bad[0]]!r}")
    X = (ds.X - mean) / scale
    return ds.replace(X=X, standardized=True), PreprocessReport(x_mean=mean, x_scale=scale)


def center_outcome_by_treatment(ds: Dataset):
    """Remove the treatment-specific outcome means (discrete treatment only)."""
    if not ds.discrete:
        raise DataValidationError(
            "outcome centering by treatment needs a discrete treatment; use center_outcome"
        )
    L = ds.n_levels
    means = np.array([ds.Y[ds.A == a].mean() for a in range(1, L + 1)])
    Y = ds.Y - means[ds.A - 1]
    return ds.replace(Y=Y, outcome_centered=True), PreprocessReport(y_shift=means)


def center_outcome(ds: Dataset):
    """Remove the grand outcome mean."""
    m = ds.Y.mean()
    return ds.replace(Y=ds.Y - m, outcome_centered=True), PreprocessReport(y_shift=np.array([m]))


def estimate_treatment_probs(ds: Dataset) -> np.ndarray:
    """Empirical treatment frequencies ``n_a / n``."""
    if not ds.discrete:
        raise DataValidationError("treatment probabilities need a discrete treatment")
    L = int(ds.A.max())
    return np.bincount(ds.A, minlength=L + 1)[1:] / ds.n


def preprocess(ds: Dataset, standardize: bool = True, center: bool = True):
    """Standardize covariates and center outcomes the way every estimator expects.

    Discrete treatments get per-treatment centering, continuous ones the grand
    mean.  Returns the new dataset and a report that :func:`inverse_preprocess`
    can undo.
    """
    report = PreprocessReport(pi=None if ds.pi is None else np.array(ds.pi))
    if standardize:
        ds, r = standardize_covariates(ds)
        report = report.merge(r)
    if center:
        ds, r = center_outcome_by_treatment(ds) if ds.discrete else center_outcome(ds)
        report = report.merge(r)
    return ds, report


def inverse_preprocess(ds: Dataset, report: PreprocessReport) -> Dataset:
    """Undo :func:`preprocess` using its report."""
    X, Y = ds.X, ds.Y
    if report.x_mean is not None:
        X = X * report.x_scale + report.x_mean
    if report.y_shift is not None:
        shift = report.y_shift
        Y = Y + (shift[ds.A - 1] if ds.discrete and shift.size > 1 else shift[0])
    return ds.replace(X=X, Y=Y, standardized=False, outcome_centered=False)
