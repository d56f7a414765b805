import json

import numpy as np
import pytest

from intsdr._linalg import qr_retract
from intsdr.data import preprocess
from intsdr.exceptions import DataValidationError, NumericalError
from intsdr.simml import FitConfig, profile_g_step
from intsdr.simulate import GeneratorSpec, generate, subspace_distance
from intsdr.stiefel import (
    MultiFit,
    MultiIndex,
    ProfiledObjective,
    aic_components,
    model_aic,
    predict_multi,
    profiled_objective,
    select_dimension,
    stiefel_optimize,
    tangent_project,
)

TWO_AXIS = [{"kind": "quadratic", "axis": 0, "coef": [1.0, -1.0]},
            {"kind": "linear", "axis": 1, "coef": [1.0, -1.0]}]


def two_index_data(seed, n=1000, sigma=0.3, p=5):
    spec = GeneratorSpec(family="semiparametric", n=n, p=p, L=2, q=2, links=TWO_AXIS, sigma=sigma,
                         seed=seed)
    ds, truth = generate(spec)
    return preprocess(ds, standardize=False)[0], truth


def one_index_data(seed, n=600, sigma=0.5, p=6):
    spec = GeneratorSpec(family="semiparametric", n=n, p=p, L=2, B0=[1.0, 1, 0, 0, 0, 0][:p],
                         links=[{"kind": "sine", "axis": 0, "coef": [1.0, -1.0]}], sigma=sigma,
                         seed=seed)
    ds, truth = generate(spec)
    return preprocess(ds, standardize=False)[0], truth


def random_stiefel(rng, p, q):
    return qr_retract(rng.standard_normal((p, q)))


def test_single_index_objective_matches_profile_step(rng):
    ds, _ = one_index_data(0)
    beta = random_stiefel(rng, 6, 1)
    cfg = FitConfig()
    expected = profile_g_step(ds, beta[:, 0], cfg).objective
    assert abs(profiled_objective(ds, beta, cfg) - expected) <= 1e-8 * expected


def test_zero_outcome_objective(rng):
    ds, _ = two_index_data(0, n=400)
    zero = ds.replace(Y=np.zeros(ds.n))
    assert profiled_objective(zero, random_stiefel(rng, 5, 2), lambdas=[1.0, 1.0]) == 0.0


def test_truth_beats_random_bases(rng):
    ds, truth = two_index_data(1, n=800, sigma=0.0)
    obj = ProfiledObjective(ds, 2)
    at_truth = obj.fit(truth.B0).objective
    for _ in range(50):
        assert at_truth < obj.fit(random_stiefel(rng, 5, 2)).objective


def test_coefficient_count_guard():
    ds, _ = two_index_data(2, n=60)
    with pytest.raises(DataValidationError, match="smaller basis dimension or q"):
        ProfiledObjective(ds, 2)


def test_finite_difference_directional_derivatives(rng):
    ds, _ = two_index_data(3, n=500, sigma=0.5)
    obj = ProfiledObjective(ds, 2)
    for _ in range(5):
        B = random_stiefel(rng, 5, 2)
        lam = obj.select(B)
        G = tangent_project(B, obj.gradient(B, lam))
        for _ in range(5):
            V = tangent_project(B, rng.standard_normal(B.shape))
            V /= np.linalg.norm(V)
            h = 1e-5
            fd = (obj.value(qr_retract(B + h * V), lam) - obj.value(qr_retract(B - h * V), lam)) / (2 * h)
            assert abs(fd - np.sum(G * V)) <= 1e-3 * max(abs(fd), 1e-3 * np.linalg.norm(G))


def test_rotation_by_quarter_turn_keeps_objective(rng):
    ds, _ = two_index_data(4, n=500)
    obj = ProfiledObjective(ds, 2)
    B = random_stiefel(rng, 5, 2)
    lam = np.array([0.5, 2.0])
    R = np.array([[0.0, -1.0], [1.0, 0.0]])
    base = obj.value(B, lam)
    assert abs(obj.value(B @ R, lam) - base) <= 1e-6 * base


def test_optimizer_output_invariants():
    ds, truth = two_index_data(5, n=1000)
    fit = stiefel_optimize(ds, 2, max_iter=60)
    assert np.linalg.norm(fit.B.T @ fit.B - np.eye(2)) < 1e-8
    assert np.max(np.abs(fit.pi @ fit.theta)) < 1e-10
    for k in range(2):
        col = fit.B[:, k]
        assert col[np.flatnonzero(np.abs(col) > 1e-12)[0]] > 0
    assert subspace_distance(fit.B, truth.B0).max_angle < 10
    again = MultiFit.from_dict(json.loads(fit.to_json()))
    X = np.random.default_rng(0).uniform(-1, 1, (10, 5))
    np.testing.assert_array_equal(predict_multi(again, X), predict_multi(fit, X))


def test_stationary_at_truth():
    ds, truth = two_index_data(6, n=1500, sigma=0.0)
    fit = stiefel_optimize(ds, 2, init=truth.B0, max_iter=20)
    assert subspace_distance(fit.B, truth.B0).max_angle < 0.1


def test_single_index_agrees_with_alternating_fit():
    from intsdr.simml import fit_simml

    ds, _ = one_index_data(7, n=1000)
    a = fit_simml(ds).beta
    b = stiefel_optimize(ds, 1).B[:, 0]
    assert subspace_distance(a, b).max_angle < 1.0


def test_aic_dimension_term():
    ds, _ = one_index_data(8, n=400)
    fit1 = stiefel_optimize(ds, 1, max_iter=5)
    fit2 = stiefel_optimize(ds, 2, max_iter=5)
    for fit, extra in ((fit1, 10.0), (fit2, 20.0)):
        parts = aic_components(fit, ds)
        assert parts["dimension"] == extra
        assert parts["aic"] - parts["fit"] == pytest.approx(extra + 2 * fit.edf, abs=1e-12)
        assert model_aic(fit, ds) == parts["aic"]
        assert parts["fit"] == pytest.approx(ds.n * np.log(fit.rss / ds.n))
    fit1.rss = 0.0
    with pytest.raises(NumericalError, match="saturated fit; AIC undefined"):
        model_aic(fit1, ds)


def test_unpenalized_edf_is_coefficient_count(rng):
    ds, _ = one_index_data(9, n=400)
    link = ProfiledObjective(ds, 1).fit(random_stiefel(rng, 6, 1), lambdas=[0.0, 0.0])
    # Eight coefficients per treatment minus the eight absorbed by the constraint.
    assert link.edf == pytest.approx(8, abs=1e-8)


def test_select_dimension_small_cases():
    ds, _ = one_index_data(10, n=600)
    sel = select_dimension(ds, q_max=1)
    assert sel.selected == 1 and list(sel.aic) == [1]
    sel = select_dimension(ds, q_max=2, max_iter=50)
    assert sel.selected == 1
    assert "*" in sel.table().splitlines()[1]
    d = sel.to_dict()
    assert set(d["aic"]) == {"1", "2"}
    with pytest.raises(DataValidationError):
        select_dimension(ds, q_max=0)


def test_select_dimension_records_failures():
    ds, _ = one_index_data(11, n=100)
    # q=2 needs 36 * 2 coefficients, q=3 needs 216 * 2 > n.
    sel = select_dimension(ds, q_max=3, max_iter=5)
    assert 3 in sel.errors and 3 not in sel.aic
    assert "failed" in sel.table()


def test_bad_arguments():
    ds, _ = one_index_data(12, n=200)
    with pytest.raises(DataValidationError):
        stiefel_optimize(ds, 6)
    with pytest.raises(DataValidationError):
        stiefel_optimize(ds, 1, init="nope")
    with pytest.raises(DataValidationError):
        stiefel_optimize(ds, 1, init=np.ones((5, 1)))


def test_estimator_fixed_and_auto():
    ds, _ = one_index_data(13, n=500)
    est = MultiIndex(n_components=1, max_iter=30).fit(ds.X, ds.Y, ds.A)
    assert est.B_.shape == (6, 1) and np.isfinite(est.aic_)
    auto = MultiIndex(q_max=2, max_iter=30).fit(ds.X, ds.Y, ds.A)
    assert auto.selection_.selected in (1, 2)
    assert auto.predict(ds.X[:5]).shape == (5,)
