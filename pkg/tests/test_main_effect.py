import numpy as np
import pytest

from intsdr import SIMML
from intsdr.data import make_dataset, preprocess
from intsdr.exceptions import DataValidationError
from intsdr.main_effect import additive_main_effect, remove_main_effect
from intsdr.simml import FitConfig, fit_simml
from intsdr.simulate import GeneratorSpec, generate, subspace_distance


def test_additive_fit_recovers_smooth_terms(rng):
    X = rng.uniform(-2, 2, (800, 3))
    truth = np.cos(X[:, 0]) + 0.5 * X[:, 1] ** 2
    fitted = additive_main_effect(X, truth + 0.05 * rng.standard_normal(800))
    assert np.sqrt(np.mean((fitted - truth) ** 2)) < 0.03


def test_additive_fit_edge_columns(rng):
    X = np.column_stack([np.ones(50), rng.integers(0, 2, 50), rng.standard_normal(50)])
    Y = 2.0 * X[:, 1] + 1.0
    fitted = additive_main_effect(X, Y)
    np.testing.assert_allclose(fitted, Y, atol=1e-6)
    np.testing.assert_allclose(additive_main_effect(np.ones((5, 1)), np.arange(5.0)), 2.0)


def test_removal_keeps_treatment_centering(small_discrete):
    prepared, _ = preprocess(small_discrete)
    cfg = FitConfig(main_effect="additive")
    adjusted = remove_main_effect(prepared, cfg)
    for a in (1, 2, 3):
        assert abs(adjusted.Y[adjusted.A == a].mean()) < 1e-12
    assert remove_main_effect(prepared, FitConfig()) is prepared
    with pytest.raises(DataValidationError):
        FitConfig(main_effect="forest")


def test_offset_removes_nuisance_effect_on_index():
    links = [{"kind": "quadratic", "axis": 0, "coef": [1.0, -1.0]}]
    angles = {}
    for tag, mu in (("flat", None), ("cos", {"kind": "cos", "scale": 5.0})):
        kw = dict(n=1500, p=4, L=2, B0=[1.0, 1.0, 0, 0], links=links, sigma=0.5, seed=3)
        if mu:
            kw["mu"] = mu
        ds, truth = generate(GeneratorSpec(**kw))
        fit = fit_simml(preprocess(ds)[0], FitConfig(main_effect="additive"))
        angles[tag] = subspace_distance(fit.beta, truth.B0).max_angle
    assert abs(angles["cos"] - angles["flat"]) < 1.0


def test_estimator_parameter(small_discrete):
    est = SIMML(main_effect="additive").fit(small_discrete.X, small_discrete.Y, small_discrete.A)
    assert est.fit_.config["main_effect"] == "additive"
