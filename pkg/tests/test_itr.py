import json

import numpy as np
import pytest

from intsdr.data import make_dataset, preprocess
from intsdr.exceptions import DataValidationError
from intsdr.linear import fit_linear_gem
from intsdr.simml import SIMML, SimmlFit, fit_simml, predict_links
from intsdr.simulate import GeneratorSpec, generate
from intsdr.itr import (
    TreatmentRule,
    ValueReport,
    constant_rule,
    ipwe_value,
    ipwe_value_arrays,
    random_rule,
    rule_from_fit,
    split_evaluate,
    train_test_split_rows,
)


def sine_data(seed=0, n=400, sigma=0.5):
    spec = GeneratorSpec(family="semiparametric", n=n, p=4, L=2, B0=[1.0, 0.5, 0, 0],
                         links=[{"kind": "sine", "axis": 0, "coef": [1.0, -1.0]}], sigma=sigma,
                         seed=seed, mu={"kind": "constant", "scale": 10.0})
    return generate(spec)


def test_ipwe_hand_example():
    y = np.array([10.0, 20, 30, 40])
    a = np.array([1, 1, 2, 2])
    assert ipwe_value_arrays([1, 2, 1, 2], a, y) == 25.0
    assert ipwe_value_arrays(a, a, y) == 25.0 == y.mean()
    with pytest.raises(DataValidationError, match="rule matches no observed assignment"):
        ipwe_value_arrays([2, 2, 1, 1], a, y)


def test_ipwe_always_a_and_shift(rng):
    X = rng.standard_normal((60, 2))
    A = np.tile([1, 2, 3], 20)
    Y = rng.standard_normal(60)
    ds = make_dataset(X, A, Y)
    for a in (1, 2, 3):
        assert ipwe_value(constant_rule(a), ds) == pytest.approx(Y[A == a].mean(), abs=1e-15)
    rule = random_rule(3, seed=1)
    shifted = make_dataset(X, A, Y + 7.5)
    assert ipwe_value(rule, shifted) == pytest.approx(ipwe_value(rule, ds) + 7.5, abs=1e-12)


def test_ipwe_needs_report_for_preprocessed_data(small_discrete):
    prepared, report = preprocess(small_discrete)
    rule = constant_rule(2)
    with pytest.raises(DataValidationError):
        ipwe_value(rule, prepared)
    assert ipwe_value(rule, prepared, report) == pytest.approx(ipwe_value(rule, small_discrete))


def test_random_rule_is_deterministic_in_x(rng):
    X = rng.standard_normal((30, 3))
    rule = random_rule(3, seed=4)
    first = rule(X)
    np.testing.assert_array_equal(rule(X[::-1])[::-1], first)
    assert set(first) <= {1, 2, 3}


def test_rule_from_simml_fit_properties():
    ds, _ = sine_data()
    prepared, report = preprocess(ds)
    fit = fit_simml(make_dataset(prepared.X, prepared.A, prepared.Y, pi=[0.5, 0.5]))
    rule = rule_from_fit(fit, report)
    X = np.random.default_rng(1).standard_normal((200, 4))
    pred = rule(X)
    # With g_2 = -g_1 the rule flips exactly where g_1 crosses zero.
    G = predict_links(fit, report.transform_X(X))
    np.testing.assert_array_equal(pred, np.where(G[:, 0] >= 0, 1, 2))
    # Scaling the links by a positive constant does not move the rule.
    scaled = SimmlFit(**{**fit.__dict__, "theta": 3.7 * fit.theta})
    np.testing.assert_array_equal(rule_from_fit(scaled, report)(X), pred)
    zero = SimmlFit(**{**fit.__dict__, "theta": np.zeros_like(fit.theta)})
    np.testing.assert_array_equal(rule_from_fit(zero, report)(X), 1)


def test_rule_from_linear_fit():
    spec = GeneratorSpec(family="linear", n=500, p=2, L=2, eta=[[1.0, 0.0], [0.0, 1.0]], sigma=0.0)
    ds, _ = generate(spec)
    fit = fit_linear_gem(preprocess(ds, standardize=False)[0])
    rule = rule_from_fit(fit)
    X = np.random.default_rng(2).standard_normal((100, 2))
    u = X @ fit.beta
    expected = np.where(fit.gamma[0] * u >= fit.gamma[1] * u, 1, 2)
    np.testing.assert_array_equal(rule(X), expected)
    assert rule.provenance == "linear"


def test_rule_from_estimator_and_rejects_other(small_discrete):
    est = SIMML().fit(small_discrete.X, small_discrete.Y, small_discrete.A)
    rule = rule_from_fit(est)
    np.testing.assert_array_equal(rule(small_discrete.X), est.predict(small_discrete.X))
    with pytest.raises(DataValidationError):
        rule_from_fit(object())


def test_split_sizes_and_redraw(rng):
    labels = np.array([1] * 50 + [2] * 10)
    train, test = train_test_split_rows(60, 2, labels, 5, rng)
    assert len(test) == 10 and len(train) == 50
    assert not set(train) & set(test)
    with pytest.raises(DataValidationError, match="redraws"):
        train_test_split_rows(6, 2, np.array([1, 1, 1, 1, 1, 2]), 5, rng)


def test_split_evaluate_reproducible_and_shaped():
    ds, _ = sine_data(n=300)
    a = split_evaluate(ds, "simml", reps=3, seed=7)
    b = split_evaluate(ds, "simml", reps=3, seed=7)
    np.testing.assert_array_equal(a.values, b.values)
    assert a.values.shape == (3,) and a.sd >= 0
    one = split_evaluate(ds, "linear", reps=1, seed=3)
    assert one.values.tolist() == split_evaluate(ds, "linear", reps=1, seed=3).values.tolist()
    assert one.sd == 0.0


def test_split_evaluate_estimators_and_errors():
    ds, _ = sine_data(n=300)
    for spec in ("linear", "random", {"name": "multi", "q": 1}):
        assert split_evaluate(ds, spec, reps=1).values.shape == (1,)
    custom = split_evaluate(ds, lambda train: constant_rule(1), reps=2)
    assert custom.estimator == "<lambda>"
    with pytest.raises(DataValidationError, match="unknown estimator"):
        split_evaluate(ds, "forest")
    with pytest.raises(DataValidationError):
        split_evaluate(preprocess(ds)[0], "linear")


def test_value_report_format():
    rep = ValueReport(values=np.array([14.0, 15.44]), ratio=5, reps=2, seed=0, estimator="simml")
    assert rep.formatted() == "14.72 (1.02)"
    d = json.loads(rep.to_json())
    assert d["summary"] == "14.72 (1.02)" and d["reps"] == 2


def test_treatment_rule_accepts_single_row():
    rule = TreatmentRule(lambda X: np.ones(X.shape[0], int), "ones")
    assert rule([0.1, 0.2]).tolist() == [1]
