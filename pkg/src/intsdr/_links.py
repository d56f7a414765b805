"""Inner penalized fit of constrained treatment-specific links for a fixed index matrix.

For index values ``U = X B`` (n x q) each treatment ``a`` gets a tensor-product
spline ``g_a(u) = T(u) theta_a`` with ``T`` the row-wise Kronecker product of
the per-axis B-spline bases.  The constraint ``sum_a pi_a theta_a = 0`` is
absorbed by writing ``theta = Z theta_tilde``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np

from .exceptions import DataValidationError
from .splines import (
    BasisSpec,
    PenalizedProblem,
    bspline_derivative_design,
    bspline_design,
    difference_penalty,
    null_space_basis,
    tensor_design,
)


@dataclass
class LinkFit:
    theta: np.ndarray        # (L, K) constrained coefficients
    specs: list              # per-axis BasisSpec
    lambdas: np.ndarray      # (L,)
    edf: float
    rss: float
    objective: float         # penalized criterion
    gcv: float
    fitted: np.ndarray = field(repr=False)
    theta_tilde: np.ndarray = field(repr=False, default=None)

    def design(self, U, clamp=True):
        U = np.atleast_2d(np.asarray(U, dtype=float).T).T
        T = bspline_design(self.specs[0], U[:, 0], clamp=clamp)
        for j in range(1, len(self.specs)):
            T = tensor_design(T, bspline_design(self.specs[j], U[:, j], clamp=clamp))
        return T

    def values(self, U, clamp=True):
        """All treatment links at the rows of ``U``: shape (n, L)."""
        return self.design(U, clamp=clamp) @ self.theta.T

    def derivatives(self, u, clamp=True):
        """d g_a / d u for single-axis links: shape (n, L)."""
        if len(self.specs) != 1:
            raise DataValidationError("derivatives are only defined for a single index")
        return bspline_derivative_design(self.specs[0], np.ravel(u), clamp=clamp) @ self.theta.T


@lru_cache(maxsize=64)
def _constraint_basis(pi: tuple, K: int) -> np.ndarray:
    C = np.kron(np.asarray(pi)[None, :], np.eye(K))
    return null_space_basis(C)


def constraint_basis(pi, K: int) -> np.ndarray:
    """``Z`` with ``sum_a pi_a theta_a = 0`` for every ``theta = Z theta_tilde``."""
    return _constraint_basis(tuple(float(v) for v in np.asarray(pi).ravel()), int(K))


def axis_penalty(dims: Sequence[int], order: int = 2) -> np.ndarray:
    """Sum over axes of ``I (x) ... (x) P_j'P_j (x) ... (x) I``."""
    K = int(np.prod(dims))
    S = np.zeros((K, K))
    for j, d in enumerate(dims):
        P = difference_penalty(d, order)
        parts = [np.eye(m) for m in dims]
        parts[j] = P.T @ P
        term = parts[0]
        for m in parts[1:]:
            term = np.kron(term, m)
        S += term
    return S


def axis_specs(U, dims: Sequence[int], degree=3, expand=0.01):
    U = np.atleast_2d(np.asarray(U, dtype=float).T).T
    return [BasisSpec.from_values(U[:, j], d=dims[j], degree=degree, expand=expand)
            for j in range(U.shape[1])]


class LinkProblem:
    """The constrained penalized least-squares problem for fixed ``U``."""

    def __init__(self, U, labels, Y, pi, dims: Sequence[int], degree=3, order=2,
                 specs: Optional[list] = None):
        U = np.atleast_2d(np.asarray(U, dtype=float).T).T
        labels = np.asarray(labels, dtype=int)
        pi = np.asarray(pi, dtype=float)
        L = pi.shape[0]
        n = U.shape[0]
        K = int(np.prod(dims))
        if K * L > n:
            raise DataValidationError(
                f"{K * L} link coefficients exceed n={n}; use a smaller basis dimension or q"
            )
        self.specs = specs if specs is not None else axis_specs(U, dims, degree)
        self.dims = tuple(dims)
        self.L, self.K, self.pi = L, K, pi
        T = bspline_design(self.specs[0], U[:, 0], clamp=True)
        for j in range(1, U.shape[1]):
            T = tensor_design(T, bspline_design(self.specs[j], U[:, j], clamp=True))
        Z = constraint_basis(pi, K)
        self.Z = Z
        Dt = np.zeros((n, Z.shape[1]))
        for a in range(1, L + 1):
            rows = labels == a
            Dt[rows] = T[rows] @ Z[(a - 1) * K: a * K]
        S_axis = axis_penalty(dims, order)
        S_list = [Z[(a - 1) * K: a * K].T @ S_axis @ Z[(a - 1) * K: a * K] for a in range(1, L + 1)]
        self.problem = PenalizedProblem(Dt, Y, S_list)

    def select(self, grid=None, n_passes=1):
        return self.problem.select(grid=grid, n_passes=n_passes)

    def fit(self, lambdas) -> LinkFit:
        pf = self.problem.fit(lambdas)
        theta = (self.Z @ pf.coef).reshape(self.L, self.K)
        return LinkFit(theta=theta, specs=list(self.specs), lambdas=pf.lambdas, edf=pf.edf,
                       rss=pf.rss, objective=pf.objective, gcv=pf.gcv, fitted=pf.fitted,
                       theta_tilde=pf.coef)


def fit_links(U, labels, Y, pi, dims, lambdas=None, grid=None, degree=3, order=2, specs=None):
    """Build the inner problem, select smoothing parameters if needed, and solve it."""
    prob = LinkProblem(U, labels, Y, pi, dims, degree=degree, order=order, specs=specs)
    if lambdas is None:
        lambdas = prob.select(grid=grid)
    return prob.fit(lambdas)
