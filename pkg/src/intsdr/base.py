"""Shared scikit-learn plumbing for the interaction estimators."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .data import make_dataset, preprocess

__all__ = ["InteractionEstimatorMixin", "check_treatment_data"]


def check_treatment_data(X, y, treatment, discrete=True):
    """Validate ``(X, y, treatment)`` triples in the usual scikit-learn way."""
    X, y = check_X_y(X, y, dtype=float, y_numeric=True)
    treatment = np.asarray(treatment).ravel()
    if treatment.shape[0] != X.shape[0]:
        raise ValueError(
            f"treatment has {treatment.shape[0]} entries but X has {X.shape[0]} rows"
        )
    if not discrete:
        treatment = check_array(treatment[:, None], dtype=float).ravel()
    return X, y, treatment


class InteractionEstimatorMixin(BaseEstimator):
    """Preprocessing shared by the estimators.

    Subclasses call :meth:`_prepare` in ``fit`` and :meth:`_scale_X` before
    projecting new covariates.  ``predict`` returns the recommended treatment
    (argmax over the fitted treatment-specific links, ties to the smallest
    label); ``transform`` returns the reduced covariates.
    """

    _discrete = True

    def _prepare(self, X, y, treatment):
        X, y, treatment = check_treatment_data(X, y, treatment, discrete=self._discrete)
        ds = make_dataset(X, treatment, y, discrete=self._discrete,
                          pi=getattr(self, "probs", None))
        self.n_features_in_ = X.shape[1]
        self.raw_dataset_ = ds
        ds, report = preprocess(ds, standardize=self.standardize, center=True)
        self.preprocess_ = report
        if self._discrete:
            self.classes_ = np.arange(1, ds.n_levels + 1)
            self.pi_ = np.array(ds.pi)
        return ds

    def _scale_X(self, X):
        check_is_fitted(self, "preprocess_")
        X = check_array(X, dtype=float)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return self.preprocess_.transform_X(X)

    def _basis(self):
        raise NotImplementedError

    def transform(self, X):
        """Project standardized covariates onto the estimated reduction."""
        return self._scale_X(X) @ self._basis()

    @property
    def input_basis_(self):
        """Orthonormal basis of the reduction expressed in raw covariate units."""
        from ._linalg import to_theta

        B = np.atleast_2d(self._basis().T).T
        if self.preprocess_.x_scale is not None:
            B = B / self.preprocess_.x_scale[:, None]
        return to_theta(B)

    def predict(self, X):
        values = self.decision_function(X)
        return self.classes_[np.argmax(values, axis=1)]

    def score(self, X, y, treatment):
        """Inverse-probability-weighted value of the fitted rule on ``(X, y, treatment)``."""
        from .itr import ipwe_value_arrays

        return ipwe_value_arrays(self.predict(X), np.asarray(treatment), np.asarray(y, dtype=float))
