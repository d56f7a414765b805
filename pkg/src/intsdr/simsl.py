"""Single-index model with a surface link for a continuous treatment.

The interaction is a single tensor-product spline ``g(beta^T x, a)``.  The
marginal treatment basis is reparametrized so that its columns sum to zero
over the observed treatments, which removes the index main effect from the
surface (the treatment main effect stays inside it).
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from sklearn.utils.validation import check_is_fitted

from ._linalg import sign_normalize
from .base import InteractionEstimatorMixin
from .data import Dataset
from .exceptions import ConvergenceWarning, DataValidationError
from .main_effect import remove_main_effect
from .simml import FitConfig, beta_change, stop_check
from .splines import (
    BasisSpec,
    PenalizedProblem,
    bspline_derivative_design,
    bspline_design,
    difference_penalty,
    null_space_basis,
    tensor_design,
)

__all__ = [
    "SIMSL",
    "SimslFit",
    "dose_response",
    "fit_simsl",
    "optimal_dose",
    "predict_surface",
    "surface_penalties",
]

FLAT_TOL = 1e-4


@dataclass
class SimslFit:
    beta: np.ndarray
    theta_star: np.ndarray     # length d * (d_check - 1)
    index_basis: BasisSpec
    dose_basis: BasisSpec
    Zbar: np.ndarray           # (d_check, d_check - 1)
    a_range: tuple
    lambdas: np.ndarray        # (index axis, treatment axis)
    edf: float
    rss: float
    objective: float
    iterations: int
    converged: bool
    index_identifiable: bool = True
    trace: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    stop_reason: str = ""

    def to_dict(self) -> dict:
        return {
            "model": "simsl",
            "beta": self.beta.tolist(),
            "theta_star": self.theta_star.tolist(),
            "index_basis": self.index_basis.to_dict(),
            "dose_basis": self.dose_basis.to_dict(),
            "Zbar": self.Zbar.tolist(),
            "a_range": list(self.a_range),
            "lambdas": self.lambdas.tolist(),
            "edf": self.edf, "rss": self.rss, "objective": self.objective,
            "iterations": self.iterations, "converged": self.converged,
            "index_identifiable": self.index_identifiable,
            "stop_reason": self.stop_reason,
            "trace": list(self.trace), "config": self.config,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "SimslFit":
        return cls(
            beta=np.asarray(d["beta"], float), theta_star=np.asarray(d["theta_star"], float),
            index_basis=BasisSpec.from_dict(d["index_basis"]),
            dose_basis=BasisSpec.from_dict(d["dose_basis"]),
            Zbar=np.asarray(d["Zbar"], float), a_range=tuple(d["a_range"]),
            lambdas=np.asarray(d["lambdas"], float), edf=float(d["edf"]), rss=float(d["rss"]),
            objective=float(d["objective"]), iterations=int(d["iterations"]),
            converged=bool(d["converged"]), index_identifiable=bool(d["index_identifiable"]),
            trace=list(d.get("trace", [])), config=dict(d.get("config", {})),
            stop_reason=d.get("stop_reason", ""),
        )


def surface_penalties(d: int, Zbar: np.ndarray, order: int = 2):
    """Index-axis and treatment-axis penalties for the constrained tensor basis."""
    P = difference_penalty(d, order)
    Pc = difference_penalty(Zbar.shape[0], order)
    m = Zbar.shape[1]
    S_index = np.kron(P.T @ P, np.eye(m))
    S_dose = np.kron(np.eye(d), Zbar.T @ Pc.T @ Pc @ Zbar)
    return S_index, S_dose


class _Surface:
    """Constrained tensor design for fixed index values."""

    def __init__(self, u, A, cfg: FitConfig, dose_basis: BasisSpec, Zbar):
        self.index_basis = BasisSpec.from_values(u, d=cfg.d, degree=cfg.degree)
        Psi = bspline_design(self.index_basis, u)
        self.dose_design = bspline_design(dose_basis, A) @ Zbar
        self.D = tensor_design(Psi, self.dose_design)
        self.penalties = surface_penalties(cfg.d, Zbar, cfg.penalty_order)

    def problem(self, Y):
        return PenalizedProblem(self.D, Y, list(self.penalties))

    def slope(self, u, theta):
        dPsi = bspline_derivative_design(self.index_basis, u)
        return tensor_design(dPsi, self.dose_design) @ theta


def _surface_step(ds, beta, cfg, dose_basis, Zbar, lambdas=None):
    u = ds.X @ beta
    surf = _Surface(u, ds.A, cfg, dose_basis, Zbar)
    prob = surf.problem(ds.Y)
    if lambdas is None:
        lambdas = prob.select(grid=cfg.grid, n_passes=2)
    return surf, prob.fit(lambdas)


def _initial_beta(ds: Dataset):
    w = ds.A - ds.A.mean()
    b, *_ = np.linalg.lstsq(ds.X * w[:, None], ds.Y, rcond=None)
    norm = np.linalg.norm(b)
    if norm == 0 or not np.isfinite(norm):
        b, norm = np.eye(ds.p)[0], 1.0
    return sign_normalize(b / norm)


def fit_simsl(ds: Dataset, cfg: FitConfig = FitConfig()) -> SimslFit:
    """Alternate constrained surface fits and linearized index updates.

    ``ds`` must have a continuous treatment and a grand-mean-centered outcome.
    The index starts at the normalized least-squares coefficient of ``Y`` on
    ``X (A - mean(A))`` unless ``cfg.init`` is a vector.
    """
    if ds.discrete:
        raise DataValidationError("fit_simsl needs a continuous treatment; use fit_simml")
    if np.ptp(ds.A) <= 0:
        raise DataValidationError("treatment has no variation")
    ds = remove_main_effect(ds, cfg)
    dose_basis = BasisSpec.from_values(ds.A, d=cfg.d, degree=cfg.degree)
    Psi_dose = bspline_design(dose_basis, ds.A)
    Zbar = null_space_basis(Psi_dose.sum(axis=0)[None, :])

    if cfg.init is not None and not isinstance(cfg.init, str):
        beta = sign_normalize(np.asarray(cfg.init, float).ravel() / np.linalg.norm(cfg.init))
    else:
        beta = _initial_beta(ds)

    surf, fit = _surface_step(ds, beta, cfg, dose_basis, Zbar)
    trace = [fit.objective]
    converged, identifiable, reason = False, True, "iteration limit"
    it = 0
    for it in range(1, cfg.max_iter + 1):
        u = ds.X @ beta
        dg = surf.slope(u, fit.coef)
        # Variation along the index relative to the surface scale; flat means no direction.
        if np.ptp(u) * np.max(np.abs(dg)) <= FLAT_TOL * np.max(np.abs(fit.fitted)):
            identifiable, converged, reason = False, True, "flat in index"
            if np.any(fit.coef):
                warnings.warn("surface is constant along the index; beta is not identified",
                              stacklevel=2)
            break
        target = ds.Y - fit.fitted + dg * u
        b, *_ = np.linalg.lstsq(ds.X * dg[:, None], target, rcond=None)
        proposal = sign_normalize(b / np.linalg.norm(b))
        cand_surf, cand = _surface_step(ds, proposal, cfg, dose_basis, Zbar, lambdas=fit.lambdas)
        step = 1.0
        for _ in range(cfg.max_halvings):
            if cand.objective <= fit.objective * (1 + 1e-10):
                break
            step /= 2
            ref = proposal if proposal @ beta >= 0 else -proposal
            mixed = beta + step * (ref - beta)
            proposal = sign_normalize(mixed / np.linalg.norm(mixed))
            cand_surf, cand = _surface_step(ds, proposal, cfg, dose_basis, Zbar, lambdas=fit.lambdas)
        change = beta_change(proposal, beta)
        beta = proposal
        old = fit.objective
        refreshed = it % cfg.lambda_every == 0
        if refreshed:
            cand_surf, cand = _surface_step(ds, beta, cfg, dose_basis, Zbar)
        surf, fit = cand_surf, cand
        trace.append(fit.objective)
        reason = stop_check(change, old, fit.objective, cfg, refreshed) or reason
        if reason != "iteration limit":
            converged = True
            break

    if not converged and identifiable:
        warnings.warn(f"fit_simsl did not converge in {cfg.max_iter} iterations",
                      ConvergenceWarning, stacklevel=2)
    return SimslFit(
        beta=beta, theta_star=fit.coef, index_basis=surf.index_basis, dose_basis=dose_basis,
        Zbar=Zbar, a_range=(float(ds.A.min()), float(ds.A.max())), lambdas=fit.lambdas,
        edf=fit.edf, rss=fit.rss, objective=fit.objective, iterations=it, converged=converged,
        index_identifiable=identifiable, trace=trace, config=cfg.to_dict(), stop_reason=reason,
    )


def predict_surface(fit: SimslFit, X, a) -> np.ndarray:
    """``g(beta^T x, a)`` for each row of ``X``; ``a`` is a scalar or one value per row.

    Index and treatment values outside the fitted domains are clamped (with a warning).
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    a = np.broadcast_to(np.asarray(a, dtype=float), (X.shape[0],))
    Psi = bspline_design(fit.index_basis, X @ fit.beta, clamp=True)
    Pc = bspline_design(fit.dose_basis, a, clamp=True) @ fit.Zbar
    return tensor_design(Psi, Pc) @ fit.theta_star


def _dose_grid(fit: SimslFit, grid):
    if np.ndim(grid) == 0:
        if int(grid) < 2:
            raise DataValidationError("dose grid needs at least 2 points")
        return np.linspace(fit.a_range[0], fit.a_range[1], int(grid))
    grid = np.sort(np.asarray(grid, dtype=float))
    if grid.size < 2:
        raise DataValidationError("dose grid needs at least 2 points")
    return grid


def dose_response(fit: SimslFit, x, grid=101):
    """``(grid, g(beta^T x, grid))`` for a single covariate vector."""
    doses = _dose_grid(fit, grid)
    X = np.repeat(np.atleast_2d(np.asarray(x, dtype=float)), doses.size, axis=0)
    return doses, predict_surface(fit, X, doses)


def optimal_dose(fit: SimslFit, x, grid=101) -> float:
    """Grid maximizer of the fitted surface at ``x``; ties go to the smallest dose."""
    doses, values = dose_response(fit, x, grid)
    return float(doses[int(np.argmax(values))])


class SIMSL(InteractionEstimatorMixin):
    """Single-index model with a surface link for a continuous treatment.

    ``predict`` returns the grid-optimal dose for each row of ``X``.
    """

    _discrete = False

    def __init__(self, d=8, max_iter=50, tol=1e-6, standardize=True, dose_grid=101,
                 lambda_grid=None, main_effect="none"):
        self.d = d
        self.max_iter = max_iter
        self.tol = tol
        self.standardize = standardize
        self.dose_grid = dose_grid
        self.lambda_grid = lambda_grid
        self.main_effect = main_effect

    def fit(self, X, y, treatment):
        ds = self._prepare(X, y, treatment)
        grid = None if self.lambda_grid is None else tuple(np.asarray(self.lambda_grid, float))
        cfg = FitConfig(d=self.d, max_iter=self.max_iter, tol=self.tol, lambda_grid=grid,
                        main_effect=self.main_effect)
        self.fit_ = fit_simsl(ds, cfg)
        self.beta_ = self.fit_.beta
        return self

    def _basis(self):
        check_is_fitted(self, "fit_")
        return self.beta_[:, None]

    def decision_function(self, X, treatment):
        """Fitted interaction surface at ``(x_i, a_i)``."""
        check_is_fitted(self, "fit_")
        return predict_surface(self.fit_, self._scale_X(X), treatment)

    def predict(self, X):
        Xs = self._scale_X(X)
        return np.array([optimal_dose(self.fit_, x, self.dose_grid) for x in Xs])

    def score(self, X, y, treatment):
        """Negative mean squared error of the surface against outcomes centered by the training mean."""
        check_is_fitted(self, "fit_")
        resid = np.asarray(y, float) - self.preprocess_.y_shift[0] - self.decision_function(X, treatment)
        return -float(np.mean(resid ** 2))
