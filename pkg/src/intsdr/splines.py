"""Penalized B-spline machinery.

B-spline bases on equally spaced (clamped) knots, difference penalties,
null-space reparametrization of linear coefficient constraints, block and
tensor-product designs, and penalized least squares with GCV smoothing
parameter selection.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import linalg
from scipy.interpolate import BSpline

from .exceptions import ClampWarning, DataValidationError, NumericalError

__all__ = [
    "BasisSpec",
    "PenalizedFit",
    "PenalizedProblem",
    "block_design",
    "block_expand",
    "bspline_basis",
    "bspline_derivative_design",
    "bspline_design",
    "clamp_to_domain",
    "default_lambda_grid",
    "difference_penalty",
    "null_space_basis",
    "penalized_fit",
    "select_lambda",
    "tensor_design",
]

DOMAIN_TOL = 1e-9


def default_lambda_grid(size=40, lo=1e-6, hi=1e6):
    return np.logspace(np.log10(lo), np.log10(hi), size)


@dataclass(frozen=True)
class BasisSpec:
    """A B-spline basis of dimension ``d`` on ``[lo, hi]``.

    Knots are equally spaced on the domain, with the boundary knots
    repeated ``degree + 1`` times.
    """

    d: int = 8
    degree: int = 3
    lo: float = 0.0
    hi: float = 1.0

    def __post_init__(self):
        if self.degree < 0:
            raise DataValidationError("degree must be nonnegative")
        if self.d < self.degree + 1:
            raise DataValidationError(f"need d >= degree + 1, got d={self.d}, degree={self.degree}")
        if not self.hi > self.lo:
            raise DataValidationError(f"empty domain [{self.lo}, {self.hi}]")

    @classmethod
    def from_values(cls, values, d=8, degree=3, expand=0.01):
        """Basis whose domain is the range of ``values`` widened by ``expand`` per side."""
        values = np.asarray(values, dtype=float)
        lo, hi = float(values.min()), float(values.max())
        width = hi - lo
        if width <= 0:
            width = max(abs(lo), 1.0)
        return cls(d=d, degree=degree, lo=lo - expand * width, hi=hi + expand * width)

    @property
    def knots(self) -> np.ndarray:
        k = self.degree
        inner = np.linspace(self.lo, self.hi, self.d - k + 1)
        return np.r_[[self.lo] * k, inner, [self.hi] * k]

    def to_dict(self) -> dict:
        return {"d": self.d, "degree": self.degree, "lo": self.lo, "hi": self.hi}

    @classmethod
    def from_dict(cls, d: dict) -> "BasisSpec":
        return cls(d=int(d["d"]), degree=int(d["degree"]), lo=float(d["lo"]), hi=float(d["hi"]))


def clamp_to_domain(spec: BasisSpec, u):
    """Clip ``u`` into the basis domain; returns ``(clipped, count_clipped)``."""
    u = np.asarray(u, dtype=float)
    out = (u < spec.lo) | (u > spec.hi)
    return np.clip(u, spec.lo, spec.hi), int(out.sum())


def _checked(spec: BasisSpec, u, clamp: bool):
    u = np.atleast_1d(np.asarray(u, dtype=float))
    tol = DOMAIN_TOL * max(1.0, spec.hi - spec.lo)
    if clamp:
        u, count = clamp_to_domain(spec, u)
        if count:
            warnings.warn(f"{count} points clamped to [{spec.lo:.4g}, {spec.hi:.4g}]",
                          ClampWarning, stacklevel=3)
        return u
    bad = (u < spec.lo - tol) | (u > spec.hi + tol)
    if bad.any():
        raise DataValidationError(
            f"{int(bad.sum())} points outside the spline domain "
            f"[{spec.lo:.6g}, {spec.hi:.6g}]; refusing to extrapolate"
        )
    return np.clip(u, spec.lo, spec.hi)


def bspline_design(spec: BasisSpec, u, clamp: bool = False) -> np.ndarray:
    """Basis evaluation matrix of shape ``(len(u), d)``.

    Points within ``1e-9`` of the domain are clamped silently; points further
    out raise unless ``clamp`` is true, in which case they are clipped with a
    :class:`ClampWarning`.
    """
    u = _checked(spec, u, clamp)
    return BSpline.design_matrix(u, spec.knots, spec.degree).toarray()


def bspline_basis(spec: BasisSpec, u: float) -> np.ndarray:
    """Basis vector of length ``d`` at a single point."""
    return bspline_design(spec, [u])[0]


def bspline_derivative_design(spec: BasisSpec, u, clamp: bool = True) -> np.ndarray:
    """First derivatives of all basis functions, shape ``(len(u), d)``."""
    u = _checked(spec, u, clamp)
    spl = BSpline(spec.knots, np.eye(spec.d), spec.degree, extrapolate=False)
    return spl.derivative()(u)


def difference_penalty(d: int, order: int = 2) -> np.ndarray:
    """Matrix of ``order``-th finite differences, shape ``(d - order, d)``."""
    if order < 1:
        raise DataValidationError("difference order must be at least 1")
    if d <= order:
        raise DataValidationError(f"need d > order, got d={d}, order={order}")
    return np.diff(np.eye(d), n=order, axis=0)


def null_space_basis(C) -> np.ndarray:
    """Orthonormal basis ``Z`` of the null space of the ``r x m`` matrix ``C``.

    Taken from the trailing columns of a full QR factorization of ``C^T``.
    """
    C = np.atleast_2d(np.asarray(C, dtype=float))
    r, m = C.shape
    rank = np.linalg.matrix_rank(C)
    if rank < r:
        raise NumericalError(f"constraint matrix is rank deficient: rank {rank} < {r} rows")
    if r >= m:
        raise NumericalError("constraint null space is empty")
    Q, _ = linalg.qr(C.T, mode="full")
    return Q[:, r:]


def block_expand(Psi, labels, L: int) -> np.ndarray:
    """Place row ``i`` of ``Psi`` into column block ``labels[i]`` (1-based) of an ``n x kL`` matrix."""
    Psi = np.asarray(Psi, dtype=float)
    labels = np.asarray(labels, dtype=int)
    n, k = Psi.shape
    D = np.zeros((n, k * L))
    for a in range(1, L + 1):
        rows = labels == a
        D[rows, (a - 1) * k: a * k] = Psi[rows]
    return D


def block_design(index, labels, spec: BasisSpec, L: Optional[int] = None,
                 clamp: bool = False) -> np.ndarray:
    """Treatment-blocked basis design ``(D_1, ..., D_L)`` of shape ``n x dL``."""
    labels = np.asarray(labels, dtype=int)
    L = int(labels.max()) if L is None else L
    return block_expand(bspline_design(spec, index, clamp=clamp), labels, L)


def tensor_design(Psi, PsiCheck) -> np.ndarray:
    """Row-wise Kronecker product: row ``i`` is ``Psi[i] (x) PsiCheck[i]``."""
    Psi = np.asarray(Psi, dtype=float)
    PsiCheck = np.asarray(PsiCheck, dtype=float)
    if Psi.shape[0] != PsiCheck.shape[0]:
        raise DataValidationError("marginal designs must have the same number of rows")
    n = Psi.shape[0]
    return (Psi[:, :, None] * PsiCheck[:, None, :]).reshape(n, -1)


# ---------------------------------------------------------------------------
# Penalized least squares
# ---------------------------------------------------------------------------

@dataclass
class PenalizedFit:
    coef: np.ndarray
    fitted: np.ndarray
    edf: float
    lambdas: np.ndarray
    gcv: float
    rss: float
    objective: float


class PenalizedProblem:
    """``min ||Y - D theta||^2 + sum_j lambda_j theta' S_j theta`` with cached cross products."""

    def __init__(self, D, Y, S_list: Sequence[np.ndarray]):
        self.D = np.asarray(D, dtype=float)
        self.Y = np.asarray(Y, dtype=float).ravel()
        if self.D.shape[0] != self.Y.shape[0]:
            raise DataValidationError("D and Y have different numbers of rows")
        self.S_list = [np.asarray(S, dtype=float) for S in S_list]
        k = self.D.shape[1]
        for S in self.S_list:
            if S.shape != (k, k):
                raise DataValidationError(f"penalty of shape {S.shape} does not match {k} coefficients")
        self.G = self.D.T @ self.D
        self.b = self.D.T @ self.Y
        self.yy = float(self.Y @ self.Y)
        self.n = self.D.shape[0]

    def _system(self, lambdas):
        lambdas = np.asarray(lambdas, dtype=float).ravel()
        if lambdas.shape[0] != len(self.S_list):
            raise DataValidationError("need one smoothing parameter per penalty")
        if np.any(lambdas < 0):
            raise DataValidationError("smoothing parameters must be nonnegative")
        M = self.G.copy()
        for lam, S in zip(lambdas, self.S_list):
            M += lam * S
        return lambdas, M

    def _solve(self, M):
        scale = max(np.abs(np.diag(M)).max(), 1e-300)
        try:
            cf = linalg.cho_factor(M, lower=True)
        except linalg.LinAlgError:
            cf = None
        if cf is not None:
            diag = np.abs(np.diag(cf[0]))
            if diag.min() ** 2 > 1e-12 * scale:
                return cf
        raise NumericalError(
            "penalized system is singular; use a positive smoothing parameter or a smaller basis"
        )

    def fit(self, lambdas) -> PenalizedFit:
        lambdas, M = self._system(lambdas)
        cf = self._solve(M)
        coef = linalg.cho_solve(cf, self.b)
        fitted = self.D @ coef
        rss = float(np.sum((self.Y - fitted) ** 2))
        edf = float(np.trace(linalg.cho_solve(cf, self.G)))
        pen = float(sum(lam * coef @ S @ coef for lam, S in zip(lambdas, self.S_list)))
        return PenalizedFit(coef=coef, fitted=fitted, edf=edf, lambdas=lambdas,
                            gcv=self._gcv(rss, edf), rss=rss, objective=rss + pen)

    def _gcv(self, rss, edf):
        denom = self.n - edf
        return np.inf if denom <= 0 else self.n * rss / denom ** 2

    def gcv(self, lambdas) -> float:
        try:
            lambdas, M = self._system(lambdas)
            cf = self._solve(M)
        except NumericalError:
            return np.inf
        coef = linalg.cho_solve(cf, self.b)
        rss = max(self.yy - 2 * coef @ self.b + coef @ self.G @ coef, 0.0)
        edf = float(np.trace(linalg.cho_solve(cf, self.G)))
        return self._gcv(rss, edf)

    def select(self, grid=None, init=1.0, n_passes: int = 1) -> np.ndarray:
        """Coordinate-wise GCV grid search; ties go to the smaller value."""
        grid = default_lambda_grid() if grid is None else np.sort(np.asarray(grid, dtype=float))
        lambdas = np.full(len(self.S_list), float(init))
        if grid.size == 1:
            return np.full(len(self.S_list), grid[0])
        flat = True
        for _ in range(n_passes):
            for j in range(len(self.S_list)):
                scores = np.empty(grid.size)
                for g, lam in enumerate(grid):
                    trial = lambdas.copy()
                    trial[j] = lam
                    scores[g] = self.gcv(trial)
                finite = scores[np.isfinite(scores)]
                if finite.size == 0:
                    raise NumericalError("GCV undefined at every grid point")
                if finite.max() - finite.min() > 1e-12 * max(abs(finite.min()), 1e-300):
                    flat = False
                lambdas[j] = grid[int(np.argmin(scores))]
        if flat:
            warnings.warn("GCV profile is flat; returning the smallest grid value", stacklevel=2)
            lambdas[:] = grid[0]
        return lambdas


def penalized_fit(D, Y, S_list, lambda_list) -> PenalizedFit:
    """Solve the penalized normal equations for fixed smoothing parameters."""
    return PenalizedProblem(D, Y, S_list).fit(lambda_list)


def select_lambda(D, Y, S_list, grid=None, n_passes: int = 1) -> np.ndarray:
    """Smoothing parameters minimizing ``GCV = n RSS / (n - edf)^2`` over a log grid."""
    return PenalizedProblem(D, Y, S_list).select(grid=grid, n_passes=n_passes)
