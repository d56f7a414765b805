"""Multi-index interaction model fitted over orthonormal bases.

For a candidate ``B`` (p x q, orthonormal columns) the treatment-specific
tensor-product links are profiled out, leaving a scalar objective in ``B``.
That objective is minimized with a projected quasi-Newton method on the
Stiefel manifold, using central finite-difference gradients and a QR
retraction.  The structural dimension ``q`` is chosen by AIC.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from joblib import Parallel, delayed
from sklearn.utils.validation import check_is_fitted

from ._linalg import qr_retract, sign_normalize
from ._links import LinkFit, axis_penalty, constraint_basis
from .base import InteractionEstimatorMixin
from .data import Dataset
from .exceptions import ConvergenceWarning, DataValidationError, NumericalError
from .main_effect import remove_main_effect
from .simml import FitConfig, fit_simml, hessian_directions, initial_direction
from .splines import BasisSpec, PenalizedProblem, bspline_design, tensor_design

__all__ = [
    "DimensionSelection",
    "MultiFit",
    "MultiIndex",
    "ProfiledObjective",
    "aic_components",
    "model_aic",
    "predict_multi",
    "profiled_objective",
    "select_dimension",
    "stiefel_optimize",
    "tangent_project",
]


def axis_dims(q: int, cfg: FitConfig) -> tuple:
    return (cfg.d,) if q == 1 else (cfg.d_multi,) * q


def tangent_project(B, G):
    """Project an ambient matrix ``G`` onto the tangent space of the Stiefel manifold at ``B``."""
    BtG = B.T @ G
    return G - B @ ((BtG + BtG.T) / 2)


class ProfiledObjective:
    """Inner constrained tensor-spline fit as a function of the index matrix ``B``.

    Per-axis designs are rebuilt from the current index values, so the knot
    domain follows ``B``.  Evaluations with frozen smoothing parameters are
    smooth in ``B``, which is what the finite-difference gradient needs.
    """

    def __init__(self, ds: Dataset, q: int, cfg: FitConfig = FitConfig()):
        if not ds.discrete:
            raise DataValidationError("multi-index fits need a discrete treatment")
        self.ds, self.q, self.cfg = ds, q, cfg
        self.dims = axis_dims(q, cfg)
        self.K = int(np.prod(self.dims))
        L = ds.n_levels
        if self.K * L > ds.n:
            raise DataValidationError(
                f"{self.K * L} link coefficients exceed n={ds.n}; use a smaller basis dimension or q"
            )
        self.Z = constraint_basis(ds.pi, self.K)
        self.blocks = [self.Z[a * self.K:(a + 1) * self.K] for a in range(L)]
        S_axis = axis_penalty(self.dims, cfg.penalty_order)
        self.S_list = [Za.T @ S_axis @ Za for Za in self.blocks]
        self.rows = [np.flatnonzero(ds.A == a + 1) for a in range(L)]

    def axis(self, u, d):
        spec = BasisSpec.from_values(u, d=d, degree=self.cfg.degree)
        return spec, bspline_design(spec, u, clamp=True)

    def axes(self, B):
        U = self.ds.X @ B
        return [self.axis(U[:, j], d) for j, d in enumerate(self.dims)]

    def problem(self, axes) -> PenalizedProblem:
        T = axes[0][1]
        for _, Psi in axes[1:]:
            T = tensor_design(T, Psi)
        Dt = np.empty((self.ds.n, self.Z.shape[1]))
        for rows, Za in zip(self.rows, self.blocks):
            Dt[rows] = T[rows] @ Za
        return PenalizedProblem(Dt, self.ds.Y, self.S_list)

    def select(self, B):
        return self.problem(self.axes(B)).select(grid=self.cfg.grid)

    def value(self, B, lambdas) -> float:
        return self.problem(self.axes(B)).fit(lambdas).objective

    def fit(self, B, lambdas=None) -> LinkFit:
        axes = self.axes(B)
        prob = self.problem(axes)
        if lambdas is None:
            lambdas = prob.select(grid=self.cfg.grid)
        pf = prob.fit(lambdas)
        theta = (self.Z @ pf.coef).reshape(self.ds.n_levels, self.K)
        return LinkFit(theta=theta, specs=[s for s, _ in axes], lambdas=pf.lambdas, edf=pf.edf,
                       rss=pf.rss, objective=pf.objective, gcv=pf.gcv, fitted=pf.fitted,
                       theta_tilde=pf.coef)

    def gradient(self, B, lambdas, h: float = 1e-5) -> np.ndarray:
        """Central finite differences in the ambient p x q coordinates (not projected)."""
        B = np.asarray(B, dtype=float)
        base = self.axes(B)
        G = np.zeros_like(B)
        for k, d in enumerate(self.dims):
            for i in range(B.shape[0]):
                vals = []
                for sgn in (1.0, -1.0):
                    col = B[:, k].copy()
                    col[i] += sgn * h
                    axes = list(base)
                    axes[k] = self.axis(self.ds.X @ col, d)
                    vals.append(self.problem(axes).fit(lambdas).objective)
                G[i, k] = (vals[0] - vals[1]) / (2 * h)
        return G


def profiled_objective(ds: Dataset, B, cfg: FitConfig = FitConfig(), lambdas=None) -> float:
    """Minimized penalized criterion of the inner link fit at ``B`` (GCV-selected λ by default)."""
    B = np.atleast_2d(np.asarray(B, dtype=float).T).T
    return ProfiledObjective(ds, B.shape[1], cfg).fit(B, lambdas).objective


@dataclass
class MultiFit:
    B: np.ndarray              # (p, q)
    theta: np.ndarray          # (L, K) with K = prod(dims)
    specs: list
    pi: np.ndarray
    lambdas: np.ndarray
    edf: float
    rss: float
    objective: float
    iterations: int
    converged: bool
    message: str = ""
    trace: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    @property
    def q(self) -> int:
        return self.B.shape[1]

    @property
    def links(self) -> LinkFit:
        return LinkFit(theta=self.theta, specs=list(self.specs), lambdas=self.lambdas,
                       edf=self.edf, rss=self.rss, objective=self.objective, gcv=np.nan,
                       fitted=None)

    def to_dict(self) -> dict:
        return {
            "model": "multi_index", "q": self.q, "B": self.B.tolist(),
            "theta": self.theta.tolist(), "specs": [s.to_dict() for s in self.specs],
            "pi": self.pi.tolist(), "lambdas": self.lambdas.tolist(), "edf": self.edf,
            "rss": self.rss, "objective": self.objective, "iterations": self.iterations,
            "converged": self.converged, "message": self.message,
            "trace": list(self.trace), "config": self.config,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "MultiFit":
        return cls(
            B=np.asarray(d["B"], float), theta=np.asarray(d["theta"], float),
            specs=[BasisSpec.from_dict(s) for s in d["specs"]], pi=np.asarray(d["pi"], float),
            lambdas=np.asarray(d["lambdas"], float), edf=float(d["edf"]), rss=float(d["rss"]),
            objective=float(d["objective"]), iterations=int(d["iterations"]),
            converged=bool(d["converged"]), message=d.get("message", ""),
            trace=list(d.get("trace", [])), config=dict(d.get("config", {})),
        )


def initial_candidates(ds: Dataset, q: int, cfg: FitConfig) -> list:
    """Starting bases for the manifold search.

    The leading eigenvectors of ``H``; the leading second-moment directions
    (:func:`~intsdr.simml.hessian_directions`); for ``q > 1`` an interleaving
    of both; and a basis whose first column is the alternating single-index
    estimate, completed by the directions it explains least.
    """
    eig = initial_direction(ds, ds.p)
    out = [eig[:, :q]]
    try:
        hess = hessian_directions(ds, ds.p)
    except NumericalError:
        hess = None
    if hess is not None:
        out.append(hess[:, :q])
        if q > 1:
            mixed = np.column_stack([c for pair in zip(eig.T, hess.T) for c in pair])
            out.append(_independent_columns(mixed, q))
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            b = fit_simml(ds, FitConfig(d=cfg.d, degree=cfg.degree, penalty_order=cfg.penalty_order,
                                        lambda_grid=cfg.lambda_grid)).beta
    except (NumericalError, DataValidationError):
        return out
    if q == 1:
        out.append(b[:, None])
    else:
        resid = eig - np.outer(b, b @ eig)
        keep = np.argsort(-np.linalg.norm(resid, axis=0), kind="stable")[: q - 1]
        out.append(qr_retract(np.column_stack([b, resid[:, np.sort(keep)]])))
    return out


def _independent_columns(M, q):
    """First ``q`` columns of ``M`` that are not (nearly) in the span of earlier picks."""
    basis = np.zeros((M.shape[0], 0))
    for col in M.T:
        r = col - basis @ (basis.T @ col)
        if np.linalg.norm(r) > 1e-6 * np.linalg.norm(col):
            basis = np.column_stack([basis, r / np.linalg.norm(r)])
        if basis.shape[1] == q:
            break
    return basis


def _retract(M):
    R = np.linalg.qr(M, mode="r")
    diag = np.abs(np.diag(R))
    if diag.min() <= 1e-10 * max(diag.max(), 1e-300):
        raise NumericalError("rank-deficient step")
    return qr_retract(M)


def stiefel_optimize(ds: Dataset, q: int, cfg: FitConfig = FitConfig(), init="auto",
                     max_iter: int = 200, gtol: float = 1e-5, ftol: float = 1e-8,
                     max_step: float = 0.5) -> MultiFit:
    """Minimize the profiled objective over p x q orthonormal ``B``.

    Parameters
    ----------
    ds : Dataset
        Preprocessed data with a discrete treatment.
    q : int
        Number of indices, ``1 <= q <= p - 1``.
    cfg : FitConfig
        Basis dimensions (``cfg.d`` for q=1, ``cfg.d_multi`` per axis otherwise)
        and the smoothing-parameter grid.
    init : "auto", "eigen" or array-like, default="auto"
        Starting basis.  "eigen" uses the leading ``q`` eigenvectors of the
        linear dispersion matrix; "auto" also tries a basis seeded by the
        alternating single-index fit (see :func:`initial_candidates`) and
        starts from whichever has the smaller profiled objective.
    max_iter, gtol, ftol : stopping rules
        Iteration cap; projected-gradient norm below ``gtol * max(1, |f|)``;
        relative decrease of the objective below ``ftol``.
    max_step : float
        Cap on the Frobenius norm of a trial step before retraction.

    Notes
    -----
    Smoothing parameters are frozen during each line search and re-selected
    by GCV after every accepted step.  The inverse-Hessian approximation
    lives in the vectorized ambient coordinates; its search direction is
    projected onto the tangent space before the step.
    """
    if not 1 <= q <= ds.p - 1:
        raise DataValidationError(f"need 1 <= q <= p - 1 = {ds.p - 1}, got q={q}")
    ds = remove_main_effect(ds, cfg)
    obj = ProfiledObjective(ds, q, cfg)
    if isinstance(init, str):
        if init not in ("auto", "eigen"):
            raise DataValidationError(f"unknown init {init!r}")
        cands = initial_candidates(ds, q, cfg) if init == "auto" else [initial_direction(ds, q)]
        scores = [obj.value(qr_retract(C), obj.select(qr_retract(C))) for C in cands]
        B = cands[int(np.argmin(scores))]
    else:
        B = np.atleast_2d(np.asarray(init, dtype=float).T).T
        if B.shape != (ds.p, q):
            raise DataValidationError(f"init must have shape ({ds.p}, {q})")
    B = qr_retract(B)

    lam = obj.select(B)
    f = obj.value(B, lam)
    g = tangent_project(B, obj.gradient(B, lam))
    Hinv = None
    trace = [f]
    converged, message = False, "iteration limit"
    it = 0
    for it in range(1, max_iter + 1):
        if np.linalg.norm(g) < gtol * max(1.0, abs(f)):
            converged, message = True, "gradient norm"
            break
        gv = g.ravel()
        direction = -gv if Hinv is None else -(Hinv @ gv)
        D = tangent_project(B, direction.reshape(B.shape))
        slope = float(np.sum(g * D))
        if slope >= 0:
            Hinv, D = None, -g
            slope = -float(np.sum(g * g))
        norm_d = np.linalg.norm(D)
        if norm_d > max_step:
            D, slope = D * (max_step / norm_d), slope * (max_step / norm_d)

        t, accepted = 1.0, False
        for _ in range(30):
            try:
                Bn = _retract(B + t * D)
            except NumericalError:
                t /= 2
                continue
            fn = obj.value(Bn, lam)
            if fn <= f + 1e-4 * t * slope:
                accepted = True
                break
            t /= 2
        if not accepted:
            converged, message = True, "line search made no progress"
            break

        rel = abs(f - fn) / max(abs(f), 1e-300)
        lam = obj.select(Bn)
        fn = obj.value(Bn, lam)
        gn = tangent_project(Bn, obj.gradient(Bn, lam))
        s, y = (Bn - B).ravel(), (gn - g).ravel()
        sy = float(s @ y)
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            if Hinv is None:
                Hinv = np.eye(s.size) * sy / float(y @ y)
            rho = 1.0 / sy
            V = np.eye(s.size) - rho * np.outer(s, y)
            Hinv = V @ Hinv @ V.T + rho * np.outer(s, s)
        B, f, g = Bn, fn, gn
        trace.append(f)
        if rel < ftol:
            converged, message = True, "relative objective change"
            break

    if not converged:
        warnings.warn(f"stiefel_optimize stopped after {max_iter} iterations",
                      ConvergenceWarning, stacklevel=2)
    B = sign_normalize(B)
    link = obj.fit(B, lam)
    return MultiFit(
        B=B, theta=link.theta, specs=link.specs, pi=np.array(ds.pi), lambdas=link.lambdas,
        edf=link.edf, rss=link.rss, objective=link.objective, iterations=it,
        converged=converged, message=message, trace=trace,
        config={**cfg.to_dict(), "max_iter": max_iter, "gtol": gtol, "ftol": ftol},
    )


def aic_components(fit: MultiFit, ds: Dataset) -> dict:
    """Fit term ``n log(RSS/n)``, ``2 edf`` and the dimension penalty ``2q(p-1)``."""
    if not fit.rss > 0:
        raise NumericalError("saturated fit; AIC undefined")
    n, p, q = ds.n, ds.p, fit.q
    parts = {"fit": n * np.log(fit.rss / n), "edf": 2 * fit.edf, "dimension": 2.0 * q * (p - 1)}
    parts["aic"] = parts["fit"] + parts["edf"] + parts["dimension"]
    return parts


def model_aic(fit: MultiFit, ds: Dataset) -> float:
    return float(aic_components(fit, ds)["aic"])


@dataclass
class DimensionSelection:
    candidates: list
    aic: dict                  # q -> AIC (successful fits only)
    selected: int
    fits: dict
    errors: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "candidates": list(self.candidates),
            "aic": {str(q): v for q, v in self.aic.items()},
            "selected": self.selected,
            "errors": {str(q): e for q, e in self.errors.items()},
            "fits": {str(q): f.to_dict() for q, f in self.fits.items()},
        }

    def table(self) -> str:
        lines = ["q\tAIC"]
        for q in self.candidates:
            val = f"{self.aic[q]:.2f}" if q in self.aic else f"failed ({self.errors[q]})"
            lines.append(f"{q}\t{val}{'  *' if q == self.selected else ''}")
        return "\n".join(lines)


def _fit_q(ds, q, cfg, max_iter):
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ConvergenceWarning)
            fit = stiefel_optimize(ds, q, cfg, max_iter=max_iter)
        return q, fit, model_aic(fit, ds), None
    except (NumericalError, DataValidationError) as exc:
        return q, None, None, str(exc)


def select_dimension(ds: Dataset, q_max: int = 3, cfg: FitConfig = FitConfig(),
                     max_iter: int = 200, n_jobs: int = 1) -> DimensionSelection:
    """Fit q = 1..q_max and keep the AIC minimizer (ties go to the smaller q).

    Failed fits are reported in ``errors`` and excluded from the comparison.
    """
    if q_max < 1:
        raise DataValidationError("q_max must be at least 1")
    results = Parallel(n_jobs=n_jobs)(
        delayed(_fit_q)(ds, q, cfg, max_iter) for q in range(1, q_max + 1)
    )
    fits, aic, errors = {}, {}, {}
    for q, fit, value, err in results:
        if err is None:
            fits[q], aic[q] = fit, value
        else:
            errors[q] = err
    if not aic:
        raise NumericalError("every candidate dimension failed: " + "; ".join(errors.values()))
    best = min(aic, key=lambda q: (aic[q], q))
    return DimensionSelection(candidates=list(range(1, q_max + 1)), aic=aic, selected=best,
                              fits=fits, errors=errors)


def predict_multi(fit: MultiFit, X) -> np.ndarray:
    """All treatment links at ``B^T x`` for each row of ``X``; shape (n, L)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    return fit.links.values(X @ fit.B)


class MultiIndex(InteractionEstimatorMixin):
    """Multi-index interaction model with tensor-product links.

    Parameters
    ----------
    n_components : int or "auto", default="auto"
        Structural dimension; "auto" selects it by AIC over ``1..q_max``.
    q_max : int, default=3
    d : int, default=8
        Basis dimension for a single index.
    d_multi : int, default=6
        Per-axis basis dimension for two or more indices.
    max_iter : int, default=200
    standardize : bool, default=True
    probs : array-like, optional
    n_jobs : int, default=1
    main_effect : {"none", "additive"}, default="none"
    """

    def __init__(self, n_components="auto", q_max=3, d=8, d_multi=6, max_iter=200,
                 standardize=True, probs=None, n_jobs=1, main_effect="none"):
        self.n_components = n_components
        self.q_max = q_max
        self.d = d
        self.d_multi = d_multi
        self.max_iter = max_iter
        self.standardize = standardize
        self.probs = probs
        self.n_jobs = n_jobs
        self.main_effect = main_effect

    def fit(self, X, y, treatment):
        ds = self._prepare(X, y, treatment)
        cfg = FitConfig(d=self.d, d_multi=self.d_multi, main_effect=self.main_effect)
        if self.n_components == "auto":
            self.selection_ = select_dimension(ds, min(self.q_max, ds.p - 1), cfg,
                                               max_iter=self.max_iter, n_jobs=self.n_jobs)
            self.fit_ = self.selection_.fits[self.selection_.selected]
        else:
            self.fit_ = stiefel_optimize(ds, int(self.n_components), cfg, max_iter=self.max_iter)
        self.B_ = self.fit_.B
        self.aic_ = model_aic(self.fit_, ds) if self.fit_.rss > 0 else np.nan
        return self

    def _basis(self):
        check_is_fitted(self, "fit_")
        return self.B_

    def decision_function(self, X):
        check_is_fitted(self, "fit_")
        return predict_multi(self.fit_, self._scale_X(X))
