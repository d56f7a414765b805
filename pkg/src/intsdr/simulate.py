"""Ground-truth data generators, subspace-recovery metrics and experiment runs.

Every generated outcome has the form ``Y = mu(X) + g(B0^T X, A) + eps`` with
a randomized treatment independent of ``X`` and Gaussian noise.  Discrete
links are checked to average to zero under ``pi``; continuous surfaces are
centered over the treatment distribution.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy.linalg import subspace_angles

from ._linalg import qr_retract, to_theta
from .data import Dataset, make_dataset
from .exceptions import DataValidationError

__all__ = [
    "GeneratorSpec",
    "GroundTruth",
    "RecoveryMetrics",
    "generate",
    "run_experiment",
    "spec_from_dict",
    "subspace_distance",
]

FAMILIES = ("linear", "rank1", "semiparametric", "continuous")

LINK_LIBRARY: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "linear": lambda u: u,
    "quadratic": lambda u: u ** 2,
    "sine": np.sin,
    "piecewise": lambda u: np.maximum(u, 0.0),
}

PROBE = np.linspace(-3.0, 3.0, 1001)


def _mu(spec: dict, X: np.ndarray) -> np.ndarray:
    kind = spec.get("kind", "zero")
    scale = float(spec.get("scale", 1.0))
    if kind == "zero":
        return np.zeros(X.shape[0])
    if kind == "linear":
        coef = np.asarray(spec.get("coef", np.ones(X.shape[1])), dtype=float)
        return scale * X @ coef
    if kind == "cos":
        return scale * np.cos(X[:, int(spec.get("axis", 0))])
    if kind == "quadratic":
        return scale * np.sum(X ** 2, axis=1)
    if kind == "constant":
        return np.full(X.shape[0], scale)
    raise DataValidationError(f"unknown mu kind {kind!r}")


@dataclass
class GeneratorSpec:
    """Description of one simulated design.

    ``links`` is a list of additive terms for the discrete families, each
    ``{"kind": <library name>, "axis": j, "coef": [c_1, ..., c_L]}`` so that
    ``g_a(U) = sum_t coef_t[a] * f_t(U[:, axis_t])``.  For the continuous
    family the terms are ``{"kind": "product", "scale": c}`` (``c u (a - a_mid)``)
    or ``{"kind": "dose_peak", "scale": c, "slope": s}``.
    """

    family: str = "semiparametric"
    n: int = 500
    p: int = 6
    L: int = 2
    q: int = 1
    pi: Optional[list] = None
    B0: Optional[list] = None
    eta: Optional[list] = None
    gamma: Optional[list] = None
    links: list = field(default_factory=list)
    mu: dict = field(default_factory=lambda: {"kind": "zero"})
    sigma: float = 1.0
    rho: float = 0.0
    a_range: tuple = (0.0, 1.0)
    seed: int = 0
    auto_center: bool = False

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise DataValidationError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        if self.n < 2 or self.p < 1:
            raise DataValidationError("need n >= 2 and p >= 1")
        if self.sigma < 0:
            raise DataValidationError("sigma must be nonnegative")
        if not -1.0 / max(self.p - 1, 1) < self.rho < 1.0:
            raise DataValidationError("rho outside the positive-definite range")
        if self.family != "continuous":
            pi = self.probs
            if pi.shape[0] != self.L or np.any(pi <= 0) or abs(pi.sum() - 1) > 1e-10:
                raise DataValidationError("pi must be L positive probabilities summing to 1")
            self.links = self._centered_links()

    @property
    def probs(self) -> np.ndarray:
        if self.pi is None:
            return np.full(self.L, 1.0 / self.L)
        return np.asarray(self.pi, dtype=float)

    @property
    def basis(self) -> np.ndarray:
        if self.family == "linear":
            raise DataValidationError("the linear family is parametrized by eta, not B0")
        if self.B0 is None:
            return np.eye(self.p)[:, : self.q]
        B = np.asarray(self.B0, dtype=float).reshape(self.p, -1)
        return to_theta(B)

    def _centered_links(self):
        pi = self.probs
        if self.family == "rank1":
            gamma = np.asarray(self.gamma, dtype=float)
            if gamma.shape[0] != self.L:
                raise DataValidationError("gamma needs one slope per treatment")
            if abs(pi @ gamma) > 1e-10:
                if not self.auto_center:
                    raise DataValidationError(
                        "slopes do not average to zero under pi; set auto_center to fix"
                    )
                self.gamma = (gamma - pi @ gamma).tolist()
            return self.links
        if self.family != "semiparametric":
            return self.links
        out = []
        for term in self.links:
            term = dict(term)
            if term.get("kind") not in LINK_LIBRARY:
                raise DataValidationError(f"unknown link kind {term.get('kind')!r}")
            coef = np.asarray(term["coef"], dtype=float)
            if coef.shape[0] != self.L:
                raise DataValidationError("each link term needs one coefficient per treatment")
            f = LINK_LIBRARY[term["kind"]](PROBE)
            avg = pi @ coef
            if np.max(np.abs(avg * f)) > 1e-10:
                if not self.auto_center:
                    raise DataValidationError(
                        "links do not average to zero under pi; set auto_center to fix"
                    )
                coef = coef - avg
            term["coef"] = coef.tolist()
            out.append(term)
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["a_range"] = list(self.a_range)
        return d


def spec_from_dict(d: dict) -> GeneratorSpec:
    d = dict(d)
    if "a_range" in d:
        d["a_range"] = tuple(d["a_range"])
    d.pop("name", None)
    return GeneratorSpec(**d)


@dataclass
class GroundTruth:
    spec: GeneratorSpec
    B0: Optional[np.ndarray]

    def interaction(self, X, A) -> np.ndarray:
        """True interaction term ``g(B0^T x, a)`` at each row."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        A = np.asarray(A)
        s = self.spec
        if s.family == "continuous":
            return self.surface(X, A)
        return self.link_matrix(X)[np.arange(X.shape[0]), A.astype(int) - 1]

    def link_matrix(self, X) -> np.ndarray:
        """All discrete links at each row, shape (n, L)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        s = self.spec
        if s.family == "linear":
            return X @ np.asarray(s.eta, dtype=float).T
        if s.family == "rank1":
            return np.outer(X @ self.B0[:, 0], np.asarray(s.gamma, dtype=float))
        if s.family == "semiparametric":
            U = X @ self.B0
            G = np.zeros((X.shape[0], s.L))
            for term in s.links:
                f = LINK_LIBRARY[term["kind"]](U[:, int(term.get("axis", 0))])
                G += np.outer(f, term["coef"])
            return G
        raise DataValidationError("link_matrix is for discrete families")

    def surface(self, X, A) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        A = np.asarray(A, dtype=float)
        lo, hi = self.spec.a_range
        mid, width = (lo + hi) / 2, hi - lo
        u = X @ self.B0[:, 0]
        out = np.zeros(X.shape[0])
        for term in self.spec.links:
            c = float(term.get("scale", 1.0))
            if term["kind"] == "product":
                out += c * u * (A - mid)
            elif term["kind"] == "dose_peak":
                peak = mid + float(term.get("slope", 0.0)) * u
                # E over uniform A of (A - peak)^2 is width^2 / 12 + (mid - peak)^2.
                out += -c * ((A - peak) ** 2 - (width ** 2 / 12 + (mid - peak) ** 2))
            else:
                raise DataValidationError(f"unknown surface kind {term['kind']!r}")
        return out

    def mu(self, X) -> np.ndarray:
        return _mu(self.spec.mu, np.atleast_2d(np.asarray(X, dtype=float)))

    def optimal_treatment(self, X) -> np.ndarray:
        """Label maximizing the true conditional mean (ties to the smallest label)."""
        return np.argmax(self.link_matrix(X), axis=1) + 1

    def to_dict(self) -> dict:
        d = {"spec": self.spec.to_dict(),
             "B0": None if self.B0 is None else self.B0.tolist()}
        s = self.spec
        if s.family == "linear":
            from .linear import GroupCoefficients, dispersion_matrix, interaction_eigenbasis

            eta = np.asarray(s.eta, dtype=float)
            gc = GroupCoefficients(eta=eta, eta_bar=s.probs @ eta, Sigma=np.eye(s.p), pi=s.probs)
            H = dispersion_matrix(gc)
            d["H"] = H.tolist()
            d["Xi"] = interaction_eigenbasis(H, s.L).Xi.tolist()
        return d


def generate(spec: GeneratorSpec):
    """Draw one dataset; returns ``(Dataset, GroundTruth)``."""
    rng = np.random.default_rng(spec.seed)
    n, p = spec.n, spec.p
    Z = rng.standard_normal((n, p))
    if spec.rho:
        X = np.sqrt(1 - spec.rho) * Z + np.sqrt(spec.rho) * rng.standard_normal((n, 1))
    else:
        X = Z
    B0 = None if spec.family == "linear" else spec.basis
    truth = GroundTruth(spec=spec, B0=B0)
    if spec.family == "continuous":
        lo, hi = spec.a_range
        A = rng.uniform(lo, hi, size=n)
        discrete = False
    else:
        A = rng.choice(np.arange(1, spec.L + 1), size=n, p=spec.probs)
        discrete = True
    eps = rng.standard_normal(n)
    Y = truth.mu(X) + truth.interaction(X, A) + spec.sigma * eps
    ds = make_dataset(X, A, Y, discrete=discrete,
                      pi=spec.probs if discrete and spec.pi is not None else None)
    return ds, truth


# ---------------------------------------------------------------------------
# Subspace metrics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RecoveryMetrics:
    angles_deg: np.ndarray
    projection_distance: float
    dims_differ: bool = False

    @property
    def max_angle(self) -> float:
        return float(self.angles_deg.max())


def subspace_distance(Bhat, B0) -> RecoveryMetrics:
    """Principal angles (degrees, ascending) and ``||P_hat - P_0||_F`` between two spans.

    Inputs are orthonormalized first.  When the dimensions differ the angles
    of the smaller span against the larger are returned and ``dims_differ``
    is set; the largest angle is then the comparison to use.
    """
    Bhat = qr_retract(np.atleast_2d(np.asarray(Bhat, dtype=float).T).T)
    B0 = qr_retract(np.atleast_2d(np.asarray(B0, dtype=float).T).T)
    if Bhat.shape[0] != B0.shape[0]:
        raise DataValidationError("bases live in different ambient dimensions")
    angles = np.sort(np.degrees(subspace_angles(Bhat, B0)))
    Pd = Bhat @ Bhat.T - B0 @ B0.T
    return RecoveryMetrics(angles_deg=angles, projection_distance=float(np.linalg.norm(Pd)),
                           dims_differ=Bhat.shape[1] != B0.shape[1])


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------

def _load_toml(path):
    try:
        import tomllib
    except ModuleNotFoundError:  # Python < 3.11
        import tomli as tomllib
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def _estimate(ds: Dataset, est: dict, seed: int):
    """Fit one estimator; returns (basis, extras)."""
    from .data import preprocess
    from .linear import fit_linear_gem, modified_covariate_fit
    from .simml import FitConfig, fit_simml
    from .simsl import fit_simsl
    from .stiefel import model_aic, stiefel_optimize

    name = est["name"]
    cfg_keys = {k: est[k] for k in ("d", "max_iter", "tol", "main_effect") if k in est}
    cfg = FitConfig(seed=seed, **cfg_keys)
    prepared, _ = preprocess(ds, standardize=bool(est.get("standardize", False)))
    if name == "linear":
        return fit_linear_gem(prepared).beta[:, None], {}
    if name == "modified_covariate":
        b = modified_covariate_fit(prepared)
        return b[:, None], {}
    if name == "simml":
        fit = fit_simml(prepared, cfg)
        return fit.beta[:, None], {"converged": fit.converged, "iterations": fit.iterations}
    if name == "simsl":
        fit = fit_simsl(prepared, cfg)
        return fit.beta[:, None], {"converged": fit.converged}
    if name == "multi":
        q = int(est.get("q", 1))
        fit = stiefel_optimize(prepared, q, cfg)
        return fit.B, {"aic": model_aic(fit, prepared), "iterations": fit.iterations}
    raise DataValidationError(f"unknown estimator {name!r}")


def run_experiment(config, output_dir=None) -> dict:
    """Run scenarios x estimators x seeds and aggregate recovery metrics.

    ``config`` is a TOML path or an equivalent dict with keys ``seeds`` (list)
    or ``n_seeds``, ``base_seed``, ``[[scenario]]`` tables of
    :class:`GeneratorSpec` fields plus ``name``, and ``[[estimator]]`` tables
    with ``name`` in {linear, modified_covariate, simml, simsl, multi}.
    Failed cells are recorded with their error message; the run continues.
    When ``output_dir`` is given, ``report.json`` and ``cells.csv`` are written.
    """
    if not isinstance(config, dict):
        config = _load_toml(config)
    base = int(config.get("base_seed", 0))
    seeds = config.get("seeds") or list(range(int(config.get("n_seeds", 1))))
    scenarios = config.get("scenario", [])
    estimators = config.get("estimator", [])
    if not scenarios or not estimators:
        raise DataValidationError("config needs at least one [[scenario]] and one [[estimator]]")

    cells = []
    for si, scen in enumerate(scenarios):
        name = scen.get("name", f"scenario{si}")
        for seed in seeds:
            data_seed = int(np.random.SeedSequence([base, si, int(seed)]).generate_state(1)[0])
            spec = spec_from_dict({**scen, "seed": data_seed})
            ds, truth = generate(spec)
            for ei, est in enumerate(estimators):
                row = {"scenario": name, "estimator": est.get("label", est["name"]),
                       "seed": int(seed), "n": spec.n, "error": ""}
                start = time.perf_counter()
                try:
                    B, extras = _estimate(ds, est, seed=int(seed))
                    ref = truth.B0 if truth.B0 is not None else np.asarray(truth.to_dict()["Xi"])
                    m = subspace_distance(B, ref)
                    row.update(max_angle_deg=m.max_angle, projection_distance=m.projection_distance)
                    row.update(extras)
                except Exception as exc:  # recorded, run continues
                    row["error"] = f"{type(exc).__name__}: {exc}"
                row["seconds"] = time.perf_counter() - start
                cells.append(row)

    summary = []
    keys = sorted({(c["scenario"], c["estimator"], c["n"]) for c in cells})
    for scen, est, n in keys:
        vals = np.array([c["max_angle_deg"] for c in cells
                         if (c["scenario"], c["estimator"], c["n"]) == (scen, est, n) and not c["error"]])
        entry = {"scenario": scen, "estimator": est, "n": n, "cells": int(vals.size)}
        if vals.size:
            q25, med, q75 = np.quantile(vals, [0.25, 0.5, 0.75])
            entry.update(median_angle_deg=float(med), q25_angle_deg=float(q25),
                         q75_angle_deg=float(q75))
        summary.append(entry)

    report = {"config": config, "cells": cells, "summary": summary}
    if output_dir is not None:
        out = Path(output_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(report, indent=2, default=_jsonable))
        fields = sorted({k for c in cells for k in c})
        with (out / "cells.csv").open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=fields)
            w.writeheader()
            w.writerows(cells)
    return report


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not serializable: {type(obj)}")
