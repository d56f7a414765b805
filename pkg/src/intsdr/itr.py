"""Individualized treatment rules and their value on held-out data.

A rule maps a covariate vector to a treatment.  Rules built from a fitted
model pick the treatment with the largest fitted interaction term (the
covariate main effect is shared by all treatments, so it never matters).
Values are estimated by the mean outcome among subjects whose observed
treatment agrees with the rule, averaged over repeated random train/test
splits.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np
from joblib import Parallel, delayed

from .data import Dataset, PreprocessReport, preprocess
from .exceptions import ConvergenceWarning, DataValidationError

__all__ = [
    "ESTIMATORS",
    "TreatmentRule",
    "ValueReport",
    "constant_rule",
    "ipwe_value",
    "ipwe_value_arrays",
    "random_rule",
    "rule_from_fit",
    "split_evaluate",
    "train_test_split_rows",
]


@dataclass(frozen=True)
class TreatmentRule:
    """Deterministic map from raw covariate rows to treatment labels."""

    func: Callable[[np.ndarray], np.ndarray]
    provenance: str = ""

    def __call__(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return np.asarray(self.func(X))


def _argmax_rule(values_fn, report: Optional[PreprocessReport], provenance: str) -> TreatmentRule:
    def func(X):
        Xs = X if report is None else report.transform_X(X)
        values = values_fn(Xs)
        # np.argmax returns the first maximizer, so ties go to the smallest label.
        return np.argmax(values, axis=1) + 1

    return TreatmentRule(func, provenance)


def rule_from_fit(fit, report: Optional[PreprocessReport] = None, provenance: str = "") -> TreatmentRule:
    """``x -> argmax_a g_a(B^T x)`` for a discrete-treatment fit.

    ``fit`` is a :class:`~intsdr.simml.SimmlFit`, :class:`~intsdr.stiefel.MultiFit`,
    :class:`~intsdr.linear.LinearGEMFit` or a fitted estimator.  When ``report``
    is given, raw covariates are transformed with it first.
    """
    from .linear import LinearGEMFit
    from .simml import SimmlFit, predict_links
    from .stiefel import MultiFit, predict_multi

    if isinstance(fit, SimmlFit):
        return _argmax_rule(lambda X: predict_links(fit, X), report, provenance or "simml")
    if isinstance(fit, MultiFit):
        return _argmax_rule(lambda X: predict_multi(fit, X), report, provenance or f"multi(q={fit.q})")
    if isinstance(fit, LinearGEMFit):
        return _argmax_rule(lambda X: fit.links(X @ fit.beta), report, provenance or "linear")
    if hasattr(fit, "decision_function") and hasattr(fit, "classes_"):
        return TreatmentRule(fit.predict, provenance or type(fit).__name__)
    raise DataValidationError(f"cannot build a treatment rule from {type(fit).__name__}")


def constant_rule(a: int) -> TreatmentRule:
    return TreatmentRule(lambda X: np.full(X.shape[0], int(a)), f"always {a}")


def random_rule(L: int, seed: int = 0) -> TreatmentRule:
    """Uniformly random labels that are still a function of ``x`` (keyed on the row bytes)."""

    def func(X):
        out = np.empty(X.shape[0], dtype=int)
        for i, row in enumerate(np.ascontiguousarray(X, dtype=float)):
            key = int.from_bytes(hashlib.blake2b(row.tobytes(), digest_size=8).digest(), "little")
            out[i] = np.random.default_rng([seed, key]).integers(1, L + 1)
        return out

    return TreatmentRule(func, f"random(L={L}, seed={seed})")


def ipwe_value_arrays(pred, A, Y) -> float:
    """Mean of ``Y`` over subjects with ``A == pred``."""
    pred, A, Y = np.asarray(pred).ravel(), np.asarray(A).ravel(), np.asarray(Y, float).ravel()
    match = pred == A
    if not match.any():
        raise DataValidationError("rule matches no observed assignment")
    return float(Y[match].sum() / match.sum())


def ipwe_value(rule: TreatmentRule, ds: Dataset, report: Optional[PreprocessReport] = None) -> float:
    """Value of ``rule`` on ``ds`` in raw outcome units.

    If ``ds`` was preprocessed, pass its ``report`` so covariates and
    outcomes are mapped back first.
    """
    from .data import inverse_preprocess

    if report is not None:
        ds = inverse_preprocess(ds, report)
    elif ds.outcome_centered or ds.standardized:
        raise DataValidationError("dataset is preprocessed; pass its PreprocessReport")
    return ipwe_value_arrays(rule(ds.X), ds.A, ds.Y)


# ---------------------------------------------------------------------------
# Repeated split evaluation
# ---------------------------------------------------------------------------

def _fit_linear(train: Dataset, options: dict):
    from .linear import fit_linear_gem

    return fit_linear_gem(train)


def _fit_simml(train: Dataset, options: dict):
    from .simml import FitConfig, fit_simml

    cfg = FitConfig(**{k: options[k] for k in ("d", "tol", "max_iter", "main_effect")
                       if k in options})
    return fit_simml(train, cfg)


def _fit_multi(train: Dataset, options: dict):
    from .simml import FitConfig
    from .stiefel import stiefel_optimize

    cfg = FitConfig(**{k: options[k] for k in ("d", "d_multi", "main_effect")
                       if k in options})
    return stiefel_optimize(train, int(options.get("q", 1)), cfg)


ESTIMATORS = {"linear": _fit_linear, "simml": _fit_simml, "multi": _fit_multi}

EstimatorSpec = Union[str, dict, Callable[[Dataset], TreatmentRule]]


def _rule_for(spec: EstimatorSpec, train: Dataset, rep_seed: int) -> TreatmentRule:
    if callable(spec):
        return spec(train)
    options = {"name": spec} if isinstance(spec, str) else dict(spec)
    name = options.get("name")
    if name == "random":
        return random_rule(train.n_levels, rep_seed)
    if name not in ESTIMATORS:
        raise DataValidationError(
            f"unknown estimator {name!r}; choose from {sorted(ESTIMATORS) + ['random']}"
        )
    prepared, report = preprocess(train, standardize=bool(options.get("standardize", True)))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        fit = ESTIMATORS[name](prepared, options)
    return rule_from_fit(fit, report, provenance=name)


def train_test_split_rows(n: int, L: int, labels, ratio: float, rng, max_redraws: int = 20):
    """Random split with ``n / (ratio + 1)`` test rows; redrawn until every group has >= L training rows."""
    n_test = int(round(n / (ratio + 1)))
    if not 1 <= n_test < n:
        raise DataValidationError(f"ratio {ratio} leaves no test or training rows for n={n}")
    for _ in range(max_redraws + 1):
        perm = rng.permutation(n)
        test, train = np.sort(perm[:n_test]), np.sort(perm[n_test:])
        counts = np.bincount(labels[train], minlength=L + 1)[1:]
        if counts.min() >= L:
            return train, test
    raise DataValidationError(
        f"could not draw a split with at least {L} training subjects per group in {max_redraws} redraws"
    )


@dataclass
class ValueReport:
    values: np.ndarray
    ratio: float
    reps: int
    seed: int
    estimator: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))

    @property
    def sd(self) -> float:
        return float(np.std(self.values, ddof=1)) if self.values.size > 1 else 0.0

    def formatted(self) -> str:
        return f"{self.mean:.2f} ({self.sd:.2f})"

    def to_dict(self) -> dict:
        return {
            "estimator": self.estimator, "values": self.values.tolist(), "mean": self.mean,
            "sd": self.sd, "summary": self.formatted(), "ratio": self.ratio, "reps": self.reps,
            "seed": self.seed, **self.extra,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def _one_split(ds: Dataset, spec, ratio, seed, rep):
    ss = np.random.SeedSequence([int(seed), int(rep)])
    split_rng = np.random.default_rng(ss)
    train_rows, test_rows = train_test_split_rows(ds.n, ds.n_levels, ds.A, ratio, split_rng)
    train, test = ds.subset(train_rows), ds.subset(test_rows)
    rule = _rule_for(spec, train, int(ss.generate_state(1)[0]))
    return ipwe_value_arrays(rule(test.X), test.A, test.Y)


def split_evaluate(ds: Dataset, estimator_spec: EstimatorSpec = "simml", ratio: float = 5,
                   reps: int = 200, seed: int = 0, n_jobs: int = 1) -> ValueReport:
    """Fit on a random training part, estimate the rule's value on the rest, repeat.

    Parameters
    ----------
    ds : Dataset
        Raw (unpreprocessed) data with a discrete treatment.  Preprocessing is
        re-estimated on each training part.
    estimator_spec : str, dict or callable
        ``"linear"``, ``"simml"``, ``"multi"`` (option ``q``) or ``"random"``;
        a dict with ``name`` plus options; or a callable mapping the raw
        training :class:`Dataset` to a :class:`TreatmentRule`.
    ratio : float, default=5
        Training-to-test size ratio.
    reps : int, default=200
    seed : int, default=0
        Replication ``r`` draws its split from ``SeedSequence([seed, r])``,
        so results do not depend on ``n_jobs``.
    """
    if not ds.discrete:
        raise DataValidationError("split evaluation needs a discrete treatment")
    if ds.standardized or ds.outcome_centered:
        raise DataValidationError("split evaluation expects raw data")
    if reps < 1:
        raise DataValidationError("reps must be at least 1")
    if isinstance(estimator_spec, (str, dict)):
        _rule_name = estimator_spec if isinstance(estimator_spec, str) else estimator_spec.get("name")
        if _rule_name not in ESTIMATORS and _rule_name != "random":
            raise DataValidationError(
                f"unknown estimator {_rule_name!r}; choose from {sorted(ESTIMATORS) + ['random']}"
            )
        label = _rule_name
    else:
        label = getattr(estimator_spec, "__name__", "custom")
    values = Parallel(n_jobs=n_jobs)(
        delayed(_one_split)(ds, estimator_spec, ratio, seed, r) for r in range(reps)
    )
    return ValueReport(values=np.asarray(values, dtype=float), ratio=ratio, reps=reps,
                       seed=seed, estimator=label)
