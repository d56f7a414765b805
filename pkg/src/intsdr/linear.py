"""Linear treatment-by-covariate interaction theory.

Treatment-specific regression coefficients ``eta_a`` are summarized by the
dispersion matrix ``H = sum_a pi_a (eta_a - eta_bar)(eta_a - eta_bar)^T``,
whose leading eigenvectors span the interaction subspace when interactions
are linear.  The rank-one generated-effect-modifier (GEM) model reads
``E[Y | X, A=a] = mu(X) + gamma_a * beta^T X`` and its optimal ``beta`` is the
leading eigenvector.  For two treatments the modified-covariate regression
recovers the same direction up to scale.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from sklearn.utils.validation import check_is_fitted

from ._linalg import sign_normalize
from .base import InteractionEstimatorMixin
from .data import Dataset
from .exceptions import DataValidationError, NumericalError

__all__ = [
    "GroupCoefficients",
    "InteractionEigenbasis",
    "LinearGEM",
    "LinearGEMFit",
    "dispersion_matrix",
    "explained_interaction_variance",
    "fit_group_coefficients",
    "fit_linear_gem",
    "gem_slopes",
    "interaction_eigenbasis",
    "modified_covariate_fit",
]

RANK_TOL = 1e-10


@dataclass(frozen=True)
class GroupCoefficients:
    eta: np.ndarray      # (L, p)
    eta_bar: np.ndarray  # (p,)
    Sigma: np.ndarray    # (p, p)
    pi: np.ndarray       # (L,)


@dataclass(frozen=True)
class InteractionEigenbasis:
    Xi: np.ndarray           # (p, L-1)
    eigenvalues: np.ndarray  # (L-1,)
    no_interaction: bool = False


def fit_group_coefficients(ds: Dataset) -> GroupCoefficients:
    """Estimate the treatment-specific slopes ``eta_a`` and the pooled covariance.

    Each ``eta_a`` is the least-squares slope (with intercept) of ``Y`` on
    ``X`` within group ``a``, i.e. ``S_a^{-1} cov_a(X, Y)`` with the
    within-group covariance ``S_a``.  ``Sigma`` is the covariance of ``X`` over
    all rows.
    """
    if not ds.discrete:
        raise DataValidationError("group coefficients need a discrete treatment")
    L = ds.n_levels
    Sigma = np.cov(ds.X, rowvar=False, ddof=1).reshape(ds.p, ds.p)
    _check_invertible(Sigma, "pooled covariance")
    eta = np.empty((L, ds.p))
    for a in range(1, L + 1):
        rows = ds.A == a
        Xa = ds.X[rows] - ds.X[rows].mean(axis=0)
        ya = ds.Y[rows] - ds.Y[rows].mean()
        if Xa.shape[0] <= ds.p:
            raise NumericalError(
                f"treatment group {a} has {Xa.shape[0]} rows, need more than p={ds.p}"
            )
        G = Xa.T @ Xa
        _check_invertible(G, f"covariance of treatment group {a}")
        eta[a - 1] = np.linalg.solve(G, Xa.T @ ya)
    pi = np.asarray(ds.pi, dtype=float)
    return GroupCoefficients(eta=eta, eta_bar=pi @ eta, Sigma=Sigma, pi=pi)


def _check_invertible(M, what):
    s = np.linalg.svd(M, compute_uv=False)
    if s[-1] <= 1e-12 * max(s[0], 1e-300):
        raise NumericalError(
            f"singular {what} (condition number {s[0] / max(s[-1], 1e-300):.3g}); "
            "add a small ridge jitter to the covariates or drop collinear columns"
        )


def dispersion_matrix(gc: GroupCoefficients) -> np.ndarray:
    """``H = sum_a pi_a (eta_a - eta_bar)(eta_a - eta_bar)^T``."""
    dev = gc.eta - gc.eta_bar
    H = (dev * gc.pi[:, None]).T @ dev
    return (H + H.T) / 2


def interaction_eigenbasis(H, L: int) -> InteractionEigenbasis:
    """Leading ``L - 1`` eigenpairs of ``H``, sign-normalized.

    Eigenvalues below ``1e-10`` times the largest are reported as zero; an
    all-zero spectrum sets ``no_interaction``.
    """
    H = np.asarray(H, dtype=float)
    p = H.shape[0]
    if H.shape != (p, p):
        raise DataValidationError("H must be square")
    if np.abs(H - H.T).max() > 1e-8:
        raise DataValidationError("H is not symmetric")
    k = L - 1
    if p <= k:
        raise DataValidationError(f"need p > L - 1, got p={p}, L={L}")
    vals, vecs = np.linalg.eigh((H + H.T) / 2)
    vecs = sign_normalize(vecs)
    lead = max(vals.max(), 0.0)
    vals = np.where(vals < RANK_TOL * lead, 0.0, vals) if lead > 0 else np.zeros_like(vals)
    # Descending eigenvalue; within numerical ties, lexicographically larger
    # eigenvector first so the output is deterministic.
    rounded = np.round(vals / (RANK_TOL * max(lead, 1.0)))
    order = _tie_order(rounded, vecs)
    vals, vecs = vals[order], vecs[:, order]
    return InteractionEigenbasis(Xi=vecs[:, :k], eigenvalues=vals[:k], no_interaction=lead == 0)


def _tie_order(rounded, vecs):
    idx = list(range(len(rounded)))
    idx.sort(key=lambda j: (-rounded[j], tuple(-np.round(vecs[:, j], 12))))
    return np.array(idx)


def gem_slopes(beta, gc: GroupCoefficients) -> np.ndarray:
    """Slopes ``gamma_a = (b'Sb)^{-1} b'S(eta_a - eta_bar)`` for a fixed direction ``b``."""
    beta = np.asarray(beta, dtype=float).ravel()
    denom = beta @ gc.Sigma @ beta
    if not denom > 0:
        raise NumericalError("beta' Sigma beta must be positive")
    return (gc.eta - gc.eta_bar) @ (gc.Sigma @ beta) / denom


def explained_interaction_variance(beta, gc: GroupCoefficients, H=None) -> float:
    """``var(gamma_A beta^T X) = beta' S H S beta / beta' S beta``."""
    beta = np.asarray(beta, dtype=float).ravel()
    H = dispersion_matrix(gc) if H is None else H
    Sb = gc.Sigma @ beta
    return float(Sb @ H @ Sb / (beta @ Sb))


def modified_covariate_fit(ds: Dataset) -> np.ndarray:
    """Least-squares coefficient of ``Y`` on ``X * (a + pi_1 - 2)`` (binary treatment)."""
    if not ds.discrete or ds.n_levels != 2:
        raise DataValidationError("modified covariate defined for binary A")
    w = ds.A + ds.pi[0] - 2.0
    Z = ds.X * w[:, None]
    coef, *_ = np.linalg.lstsq(Z, ds.Y, rcond=None)
    return coef


# ---------------------------------------------------------------------------
# Whole-pipeline result and estimator
# ---------------------------------------------------------------------------

@dataclass
class LinearGEMFit:
    groups: GroupCoefficients
    H: np.ndarray
    basis: InteractionEigenbasis
    beta: np.ndarray
    gamma: np.ndarray
    beta_star: Optional[np.ndarray] = None

    def links(self, U):
        """Treatment-specific linear links ``gamma_a * u`` evaluated on an index vector."""
        return np.outer(np.asarray(U, dtype=float).ravel(), self.gamma)

    def to_dict(self) -> dict:
        return {
            "eta": self.groups.eta.tolist(),
            "eta_bar": self.groups.eta_bar.tolist(),
            "Sigma": self.groups.Sigma.tolist(),
            "pi": self.groups.pi.tolist(),
            "H": self.H.tolist(),
            "eigenvalues": self.basis.eigenvalues.tolist(),
            "Xi": self.basis.Xi.tolist(),
            "no_interaction": self.basis.no_interaction,
            "beta": self.beta.tolist(),
            "gamma": self.gamma.tolist(),
            "beta_star": None if self.beta_star is None else self.beta_star.tolist(),
        }


def fit_linear_gem(ds: Dataset) -> LinearGEMFit:
    """Group coefficients, dispersion matrix, eigenbasis and GEM slopes in one pass."""
    gc = fit_group_coefficients(ds)
    H = dispersion_matrix(gc)
    eb = interaction_eigenbasis(H, ds.n_levels)
    beta = eb.Xi[:, 0]
    gamma = gem_slopes(beta, gc)
    beta_star = modified_covariate_fit(ds) if ds.n_levels == 2 else None
    return LinearGEMFit(groups=gc, H=H, basis=eb, beta=beta, gamma=gamma, beta_star=beta_star)


class LinearGEM(InteractionEstimatorMixin):
    """Linear generated-effect-modifier estimator.

    Parameters
    ----------
    n_components : int, default=1
        Number of leading eigenvectors of ``H`` returned by ``transform``.
    standardize : bool, default=True
        Standardize covariates before fitting.
    probs : array-like, optional
        Known randomization probabilities; estimated from the data if omitted.

    Attributes
    ----------
    fit_ : LinearGEMFit
    beta_ : ndarray of shape (n_features,)
        Leading eigenvector of ``H`` (standardized covariate scale).
    gamma_ : ndarray of shape (n_treatments,)
    """

    def __init__(self, n_components=1, standardize=True, probs=None):
        self.n_components = n_components
        self.standardize = standardize
        self.probs = probs

    def fit(self, X, y, treatment):
        ds = self._prepare(X, y, treatment)
        self.fit_ = fit_linear_gem(ds)
        self.beta_ = self.fit_.beta
        self.gamma_ = self.fit_.gamma
        self.eigenvalues_ = self.fit_.basis.eigenvalues
        return self

    def _basis(self):
        check_is_fitted(self, "fit_")
        return self.fit_.basis.Xi[:, : self.n_components]

    def decision_function(self, X):
        u = self._scale_X(X) @ self.beta_
        return self.fit_.links(u)
