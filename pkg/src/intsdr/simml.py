"""Single-index model with treatment-specific (multiple) link functions.

Alternates between a constrained penalized spline fit of the links
``g_a(beta^T x)`` for fixed ``beta`` and a linearized least-squares update of
``beta``.  The links satisfy ``sum_a pi_a g_a(u) = 0`` for every ``u``, so the
covariate main effect never has to be modeled.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from sklearn.utils.validation import check_is_fitted

from ._linalg import sign_normalize
from ._links import LinkFit, LinkProblem
from .base import InteractionEstimatorMixin
from .data import Dataset
from .main_effect import remove_main_effect
from .exceptions import (
    ConvergenceWarning,
    DataValidationError,
    NoInteractionSignalError,
    NumericalError,
)
from .splines import BasisSpec, bspline_design, default_lambda_grid

__all__ = [
    "FitConfig",
    "SIMML",
    "SimmlFit",
    "beta_change",
    "fit_simml",
    "hessian_directions",
    "initial_direction",
    "interaction_decomposition",
    "predict_links",
    "profile_g_step",
]


@dataclass(frozen=True)
class FitConfig:
    """Tuning knobs shared by the iterative estimators."""

    d: int = 8
    d_multi: int = 6           # per-axis basis dimension when q > 1
    degree: int = 3
    penalty_order: int = 2
    max_iter: int = 50
    tol: float = 1e-6
    init: object = "auto"     # "auto", "eigen" or a starting vector
    lambda_grid: Optional[tuple] = None
    lambda_every: int = 5
    max_halvings: int = 8
    obj_tol: float = 1e-10     # stall guard on the relative change of the criterion
    seed: int = 0
    main_effect: str = "none"  # "additive" subtracts a fitted E[Y|X] first

    def __post_init__(self):
        if not self.tol > 0:
            raise DataValidationError("tol must be positive")
        if self.max_iter < 1:
            raise DataValidationError("max_iter must be at least 1")
        if self.main_effect not in ("none", "additive"):
            raise DataValidationError(f"unknown main_effect {self.main_effect!r}")

    @property
    def grid(self):
        return default_lambda_grid() if self.lambda_grid is None else np.asarray(self.lambda_grid)

    def to_dict(self) -> dict:
        return {
            "d": self.d, "d_multi": self.d_multi, "degree": self.degree, "penalty_order": self.penalty_order,
            "max_iter": self.max_iter, "tol": self.tol,
            "init": self.init if isinstance(self.init, str) or self.init is None
            else np.asarray(self.init).tolist(),
            "lambda_grid": [float(self.grid[0]), float(self.grid[-1]), int(len(self.grid))],
            "lambda_every": self.lambda_every, "obj_tol": self.obj_tol, "seed": self.seed,
            "main_effect": self.main_effect,
        }


@dataclass
class SimmlFit:
    beta: np.ndarray
    theta: np.ndarray          # (L, d)
    basis: BasisSpec
    pi: np.ndarray
    lambdas: np.ndarray
    edf: float
    rss: float
    objective: float
    iterations: int
    converged: bool
    trace: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    stop_reason: str = ""

    @property
    def links(self) -> LinkFit:
        return LinkFit(theta=self.theta, specs=[self.basis], lambdas=self.lambdas, edf=self.edf,
                       rss=self.rss, objective=self.objective, gcv=np.nan, fitted=None)

    def to_dict(self) -> dict:
        return {
            "model": "simml",
            "beta": self.beta.tolist(),
            "theta": self.theta.tolist(),
            "basis": self.basis.to_dict(),
            "pi": self.pi.tolist(),
            "lambdas": self.lambdas.tolist(),
            "edf": self.edf,
            "rss": self.rss,
            "objective": self.objective,
            "iterations": self.iterations,
            "converged": self.converged,
            "stop_reason": self.stop_reason,
            "trace": list(self.trace),
            "config": self.config,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "SimmlFit":
        return cls(
            beta=np.asarray(d["beta"], dtype=float),
            theta=np.asarray(d["theta"], dtype=float),
            basis=BasisSpec.from_dict(d["basis"]),
            pi=np.asarray(d["pi"], dtype=float),
            lambdas=np.asarray(d["lambdas"], dtype=float),
            edf=float(d["edf"]), rss=float(d["rss"]), objective=float(d["objective"]),
            iterations=int(d["iterations"]), converged=bool(d["converged"]),
            trace=list(d.get("trace", [])), config=dict(d.get("config", {})),
            stop_reason=d.get("stop_reason", ""),
        )


def stop_check(change: float, old_obj: float, new_obj: float, cfg: "FitConfig", refreshed: bool):
    """Shared stopping rule: small index change, or a stalled criterion at fixed smoothing."""
    if change < cfg.tol:
        return "beta change"
    if not refreshed and abs(new_obj - old_obj) <= cfg.obj_tol * max(abs(old_obj), 1e-300):
        return "objective stalled"
    return ""


def initial_direction(ds: Dataset, q: int = 1) -> np.ndarray:
    """Leading ``q`` eigenvectors of the dispersion matrix ``H`` as a p x q matrix.

    Falls back to coordinate axes when the group coefficients cannot be
    estimated (too few rows per group).
    """
    from .linear import dispersion_matrix, fit_group_coefficients

    try:
        H = dispersion_matrix(fit_group_coefficients(ds))
    except NumericalError:
        warnings.warn("linear initialization failed; starting from coordinate axes", stacklevel=2)
        return np.eye(ds.p)[:, :q]
    vals, vecs = np.linalg.eigh(H)
    vecs = sign_normalize(vecs[:, np.argsort(-vals, kind="stable")])
    return vecs[:, :q]


def hessian_directions(ds: Dataset, q: int = 1) -> np.ndarray:
    """Leading ``q`` directions of between-treatment variation in second moments.

    With whitened covariates ``z`` and per-treatment matrices
    ``M_a = mean_{A=a} y (z z^T - I)``, the eigenvectors of
    ``sum_a pi_a (M_a - M_bar)^2`` pick up index directions along which the
    links differ in curvature, which the linear dispersion matrix misses
    (e.g. links symmetric in the index).  Returned on the covariate scale.
    """
    Xc = ds.X - ds.X.mean(axis=0)
    S = np.atleast_2d(np.cov(Xc, rowvar=False))
    w, V = np.linalg.eigh(S)
    if w.min() <= 1e-12 * max(w.max(), 1e-300):
        raise NumericalError("singular covariate covariance")
    root_inv = V @ np.diag(w ** -0.5) @ V.T
    Z = Xc @ root_inv
    y = ds.Y - ds.Y.mean()
    M = []
    for a in range(1, ds.n_levels + 1):
        rows = ds.A == a
        Za, ya = Z[rows], y[rows]
        M.append((Za * ya[:, None]).T @ Za / rows.sum() - ya.mean() * np.eye(ds.p))
    M = np.array(M)
    Mbar = np.tensordot(ds.pi, M, axes=1)
    K = sum(pa * (Ma - Mbar) @ (Ma - Mbar) for pa, Ma in zip(ds.pi, M))
    vals, vecs = np.linalg.eigh((K + K.T) / 2)
    top = vecs[:, np.argsort(-vals, kind="stable")[:q]]
    B = root_inv @ top
    return sign_normalize(B / np.linalg.norm(B, axis=0))


def starting_directions(ds: Dataset) -> list:
    """Candidate single-index starts: the linear and the second-moment direction."""
    out = [initial_direction(ds, 1)[:, 0]]
    try:
        out.append(hessian_directions(ds, 1)[:, 0])
    except NumericalError:
        pass
    return out


def profile_g_step(ds: Dataset, beta, cfg: FitConfig = FitConfig(), lambdas=None) -> LinkFit:
    """Constrained penalized link fit for a fixed index direction.

    Smoothing parameters are chosen by GCV when ``lambdas`` is None.
    """
    beta = np.asarray(beta, dtype=float).ravel()
    u = ds.X @ beta
    prob = LinkProblem(u, ds.A, ds.Y, ds.pi, (cfg.d,), degree=cfg.degree, order=cfg.penalty_order)
    if lambdas is None:
        lambdas = prob.select(grid=cfg.grid)
    return prob.fit(lambdas)


def beta_change(new, old) -> float:
    """Entrywise relative change ``||(new - old) / new||``, ignoring a global sign flip."""
    new, old = np.asarray(new, float), np.asarray(old, float)
    best = np.inf
    for s in (1.0, -1.0):
        diff = new - s * old
        denom = np.where(np.abs(new) > 1e-12, new, 1.0)
        best = min(best, float(np.linalg.norm(diff / denom)))
    return best


def _index_update(ds: Dataset, beta, link: LinkFit):
    u = ds.X @ beta
    rows = np.arange(ds.n)
    g = link.values(u[:, None])[rows, ds.A - 1]
    dg = link.derivatives(u)[rows, ds.A - 1]
    if np.max(np.abs(dg)) <= 1e-12 * max(1.0, np.max(np.abs(g))):
        raise NoInteractionSignalError("no interaction signal for index update")
    target = ds.Y - g + dg * u
    design = ds.X * dg[:, None]
    b, *_ = np.linalg.lstsq(design, target, rcond=None)
    norm = np.linalg.norm(b)
    if not np.isfinite(norm) or norm == 0:
        raise NoInteractionSignalError("no interaction signal for index update")
    return sign_normalize(b / norm)


def fit_simml(ds: Dataset, cfg: FitConfig = FitConfig()) -> SimmlFit:
    """Alternate link fits and linearized index updates until ``beta`` settles.

    With ``cfg.init="auto"`` the start is whichever of :func:`starting_directions`
    gives the smaller penalized criterion; ``"eigen"`` uses the leading
    eigenvector of ``H`` only.

    The index step minimizes the first-order expansion of the residual sum of
    squares around the current ``beta``, then rescales to unit norm.  When a
    step increases the penalized criterion (at fixed smoothing parameters) it
    is halved, up to ``cfg.max_halvings`` times.  Smoothing parameters are
    re-selected every ``cfg.lambda_every`` iterations.
    """
    if not ds.discrete:
        raise DataValidationError("fit_simml needs a discrete treatment; use fit_simsl")
    ds = remove_main_effect(ds, cfg)
    if isinstance(cfg.init, str) or cfg.init is None:
        if cfg.init == "eigen":
            cands = [initial_direction(ds, 1)[:, 0]]
        elif cfg.init in ("auto", None):
            cands = starting_directions(ds)
        else:
            raise DataValidationError(f"unknown init {cfg.init!r}")
        fits = [profile_g_step(ds, b, cfg) for b in cands]
        best = int(np.argmin([f.objective for f in fits]))
        beta, link = sign_normalize(cands[best]), fits[best]
    else:
        beta = sign_normalize(np.asarray(cfg.init, float).ravel() / np.linalg.norm(cfg.init))
        link = profile_g_step(ds, beta, cfg)
    trace = [link.objective]
    converged, reason = False, "iteration limit"
    it = 0
    for it in range(1, cfg.max_iter + 1):
        if not np.any(link.theta):
            converged, reason = True, "zero links"
            break
        proposal = _index_update(ds, beta, link)
        cand = profile_g_step(ds, proposal, cfg, lambdas=link.lambdas)
        step = 1.0
        for _ in range(cfg.max_halvings):
            if cand.objective <= link.objective * (1 + 1e-10):
                break
            step /= 2
            mixed = beta + step * (_align(proposal, beta) - beta)
            proposal = sign_normalize(mixed / np.linalg.norm(mixed))
            cand = profile_g_step(ds, proposal, cfg, lambdas=link.lambdas)
        change = beta_change(proposal, beta)
        beta = proposal
        old = link.objective
        refreshed = it % cfg.lambda_every == 0
        if refreshed:
            cand = profile_g_step(ds, beta, cfg)
        link = cand
        trace.append(link.objective)
        reason = stop_check(change, old, link.objective, cfg, refreshed) or reason
        if reason != "iteration limit":
            converged = True
            break

    if not converged:
        warnings.warn(f"fit_simml did not converge in {cfg.max_iter} iterations",
                      ConvergenceWarning, stacklevel=2)
    return SimmlFit(
        beta=beta, theta=link.theta, basis=link.specs[0], pi=np.array(ds.pi),
        lambdas=link.lambdas, edf=link.edf, rss=link.rss, objective=link.objective,
        iterations=it, converged=converged, trace=trace, config=cfg.to_dict(),
        stop_reason=reason,
    )


def interaction_decomposition(u, A, Y, n_bins: int = 1) -> dict:
    """Sum-of-squares split around unpenalized binned fits of ``Y`` on the index ``u``.

    ``pooled`` is the bin mean of ``Y`` (ignoring treatment) and ``full`` the
    bin-by-treatment mean.  Returns ``total = sum (Y - pooled)^2``,
    ``residual = sum (Y - full)^2`` and ``interaction = sum (full - pooled)^2``,
    plus both fitted vectors.  With ``n_bins=1`` the pooled fit is the grand
    mean and the full fit the treatment means.
    """
    u, A, Y = np.asarray(u, float).ravel(), np.asarray(A).ravel(), np.asarray(Y, float).ravel()
    if n_bins < 1:
        raise DataValidationError("n_bins must be at least 1")
    edges = np.quantile(u, np.linspace(0, 1, n_bins + 1)[1:-1])
    bins = np.searchsorted(edges, u, side="right")
    pooled, full = np.empty_like(Y), np.empty_like(Y)
    for b in np.unique(bins):
        in_bin = bins == b
        pooled[in_bin] = Y[in_bin].mean()
        for a in np.unique(A[in_bin]):
            cell = in_bin & (A == a)
            full[cell] = Y[cell].mean()
    return {
        "total": float(np.sum((Y - pooled) ** 2)),
        "residual": float(np.sum((Y - full) ** 2)),
        "interaction": float(np.sum((full - pooled) ** 2)),
        "pooled": pooled,
        "full": full,
    }


def _align(v, ref):
    return v if v @ ref >= 0 else -v


def predict_links(fit: SimmlFit, X) -> np.ndarray:
    """``(g_a(beta^T x))_a`` for every row of ``X``; shape (n, L).

    Index values outside the fitted knot domain are clamped (with a warning).
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    u = X @ fit.beta
    return bspline_design(fit.basis, u, clamp=True) @ fit.theta.T


class SIMML(InteractionEstimatorMixin):
    """Single-index model with multiple treatment-specific links.

    Parameters
    ----------
    d : int, default=8
        B-spline basis dimension of each link.
    max_iter : int, default=50
    tol : float, default=1e-6
        Tolerance on the entrywise relative change of ``beta``.
    standardize : bool, default=True
    probs : array-like, optional
        Known randomization probabilities.
    lambda_grid : array-like, optional
        Smoothing-parameter grid; 40 log-spaced values on [1e-6, 1e6] by default.
    main_effect : {"none", "additive"}, default="none"
        "additive" subtracts a penalized additive fit of ``E[Y|X]`` first, which
        cuts the noise a large covariate main effect adds to the index estimate.

    Attributes
    ----------
    fit_ : SimmlFit
    beta_ : ndarray of shape (n_features,)
        Unit index direction on the standardized covariate scale.
    """

    def __init__(self, d=8, max_iter=50, tol=1e-6, standardize=True, probs=None,
                 lambda_grid=None, main_effect="none"):
        self.d = d
        self.max_iter = max_iter
        self.tol = tol
        self.standardize = standardize
        self.probs = probs
        self.lambda_grid = lambda_grid
        self.main_effect = main_effect

    def _config(self):
        grid = None if self.lambda_grid is None else tuple(np.asarray(self.lambda_grid, float))
        return FitConfig(d=self.d, max_iter=self.max_iter, tol=self.tol, lambda_grid=grid,
                         main_effect=self.main_effect)

    def fit(self, X, y, treatment):
        ds = self._prepare(X, y, treatment)
        self.fit_ = fit_simml(ds, self._config())
        self.beta_ = self.fit_.beta
        self.n_iter_ = self.fit_.iterations
        return self

    def _basis(self):
        check_is_fitted(self, "fit_")
        return self.beta_[:, None]

    def decision_function(self, X):
        check_is_fitted(self, "fit_")
        return predict_links(self.fit_, self._scale_X(X))
