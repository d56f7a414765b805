import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from intsdr import SIMML, SIMSL, LinearGEM, MultiIndex


@pytest.mark.parametrize("cls", [LinearGEM, SIMML, SIMSL, MultiIndex])
def test_params_and_clone(cls):
    est = cls()
    params = est.get_params()
    twin = clone(est)
    assert twin.get_params() == params
    with pytest.raises(NotFittedError):
        est.transform(np.zeros((2, 3)))


@pytest.mark.parametrize("cls", [LinearGEM, SIMML])
def test_fit_transform_predict(cls, small_discrete):
    est = cls().fit(small_discrete.X, small_discrete.Y, small_discrete.A)
    Z = est.transform(small_discrete.X)
    assert Z.shape[0] == small_discrete.n
    pred = est.predict(small_discrete.X)
    assert set(np.unique(pred)) <= set(est.classes_)
    assert np.isfinite(est.score(small_discrete.X, small_discrete.Y, small_discrete.A))
    B = est.input_basis_
    np.testing.assert_allclose(B.T @ B, np.eye(B.shape[1]), atol=1e-10)
    with pytest.raises(ValueError):
        est.predict(small_discrete.X[:, :2])


def test_input_basis_undoes_standardization(rng):
    X = rng.standard_normal((600, 3)) * np.array([10.0, 1.0, 0.1])
    A = rng.integers(1, 3, 600)
    u = X @ np.array([0.1, 1.0, 0.0])
    Y = u * (A - 1.5) + 0.05 * rng.standard_normal(600)
    est = LinearGEM().fit(X, Y, A)
    b = est.input_basis_[:, 0]
    target = np.array([0.1, 1.0, 0.0]) / np.linalg.norm([0.1, 1.0, 0.0])
    assert abs(b @ target) > 0.99


def test_mismatched_treatment_length(small_discrete):
    with pytest.raises(ValueError, match="treatment has"):
        SIMML().fit(small_discrete.X, small_discrete.Y, small_discrete.A[:-1])
