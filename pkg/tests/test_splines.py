import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import comb

from conftest import oracle_basis
from intsdr.exceptions import ClampWarning, DataValidationError, NumericalError
from intsdr.splines import (
    BasisSpec,
    PenalizedProblem,
    block_design,
    bspline_basis,
    bspline_design,
    default_lambda_grid,
    difference_penalty,
    null_space_basis,
    penalized_fit,
    select_lambda,
    tensor_design,
)
from intsdr._links import constraint_basis

SPEC = BasisSpec(d=8, degree=3, lo=-2.0, hi=3.0)


@settings(max_examples=60, deadline=None)
@given(st.floats(-2.0, 3.0))
def test_partition_of_unity_and_support(u):
    v = bspline_basis(SPEC, u)
    assert abs(v.sum() - 1) < 1e-12
    assert np.all(v >= 0)
    assert np.count_nonzero(v > 0) <= SPEC.degree + 1


@pytest.mark.parametrize("u", [-2.0, -1.3, 0.0, 0.5, 1.7, 2.999, 3.0])
def test_matches_cox_de_boor(u):
    np.testing.assert_allclose(bspline_basis(SPEC, u), oracle_basis(SPEC, u), atol=1e-12)


def test_left_endpoint_mass_on_first_function():
    v = bspline_basis(SPEC, SPEC.lo)
    assert v[0] == pytest.approx(1.0, abs=1e-12)


def test_single_span_is_bernstein():
    spec = BasisSpec(d=4, degree=3, lo=1.0, hi=4.0)
    for u in np.linspace(1, 4, 13):
        t = (u - 1) / 3
        bern = [comb(3, k) * t ** k * (1 - t) ** (3 - k) for k in range(4)]
        np.testing.assert_allclose(bspline_basis(spec, u), bern, atol=1e-12)


def test_domain_handling():
    with pytest.raises(DataValidationError, match="extrapolate"):
        bspline_design(SPEC, [3.1])
    np.testing.assert_allclose(bspline_design(SPEC, [3.0 + 1e-10]), bspline_design(SPEC, [3.0]))
    with pytest.warns(ClampWarning, match="1 points clamped"):
        out = bspline_design(SPEC, [4.0, 0.0], clamp=True)
    np.testing.assert_allclose(out[0], bspline_basis(SPEC, 3.0))


def test_spec_validation():
    with pytest.raises(DataValidationError):
        BasisSpec(d=3, degree=3)
    with pytest.raises(DataValidationError):
        BasisSpec(lo=1.0, hi=1.0)
    assert np.all(np.diff(SPEC.knots[3:-3]) > 0)


def test_difference_penalty_examples():
    np.testing.assert_array_equal(difference_penalty(4, 2), [[1, -2, 1, 0], [0, 1, -2, 1]])
    np.testing.assert_array_equal(difference_penalty(3, 1), [[-1, 1, 0], [0, -1, 1]])
    P = difference_penalty(9, 2)
    np.testing.assert_array_equal(P @ np.ones(9), 0)
    np.testing.assert_array_equal(P @ np.arange(1, 10), 0)
    with pytest.raises(DataValidationError):
        difference_penalty(2, 2)


def test_null_space_examples():
    Z = null_space_basis([[3.0, 3.0]])
    assert Z.shape == (2, 1)
    assert abs(abs(Z[0, 0]) - 1 / np.sqrt(2)) < 1e-12 and abs(Z[0, 0] + Z[1, 0]) < 1e-12
    with pytest.raises(NumericalError):
        null_space_basis(np.eye(3))
    with pytest.raises(NumericalError, match="rank 1"):
        null_space_basis([[1.0, 2, 3], [2, 4, 6]])


def test_null_space_properties_and_determinism(rng):
    C = rng.standard_normal((2, 7))
    Z = null_space_basis(C)
    assert np.max(np.abs(C @ Z)) < 1e-12
    np.testing.assert_allclose(Z.T @ Z, np.eye(5), atol=1e-12)
    np.testing.assert_array_equal(Z, null_space_basis(C))


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(0.05, 1.0), min_size=2, max_size=4), st.integers(0, 2 ** 31 - 1))
def test_treatment_constraint_exact(weights, seed):
    pi = np.array(weights) / np.sum(weights)
    K = 5
    Z = constraint_basis(pi, K)
    tt = np.random.default_rng(seed).standard_normal(Z.shape[1])
    theta = (Z @ tt).reshape(len(pi), K)
    assert np.max(np.abs(pi @ theta)) < 1e-12
    # Penalty transformed by Z agrees with the penalty on the expanded coefficients.
    P = difference_penalty(K, 2)
    S = np.kron(np.eye(len(pi)), P.T @ P)
    full = Z @ tt
    assert abs(tt @ (Z.T @ S @ Z) @ tt - full @ S @ full) < 1e-12 * max(1.0, full @ S @ full)


def test_block_design_structure(rng):
    spec = BasisSpec(d=5, lo=0, hi=1)
    u = np.array([0.2, 0.7])
    D = block_design(u, [1, 2], spec, L=2)
    np.testing.assert_array_equal(D[0, 5:], 0)
    np.testing.assert_array_equal(D[1, :5], 0)
    u = rng.uniform(0, 1, 30)
    labels = rng.integers(1, 4, 30)
    D = block_design(u, labels, spec, L=3)
    np.testing.assert_allclose(D[:, :5] + D[:, 5:10] + D[:, 10:], bspline_design(spec, u), atol=1e-15)
    theta = rng.standard_normal((3, 5))
    pointwise = [oracle_basis(spec, ui) @ theta[a - 1] for ui, a in zip(u, labels)]
    np.testing.assert_allclose(D @ theta.ravel(), pointwise, atol=1e-12)


def test_tensor_design_examples(rng):
    np.testing.assert_array_equal(tensor_design([[2.0, 3.0]], [[5.0, 7.0, 11.0]]),
                                  [[10, 14, 22, 15, 21, 33]])
    s1, s2 = BasisSpec(d=6, lo=0, hi=1), BasisSpec(d=5, lo=-1, hi=1)
    u, a = rng.uniform(0, 1, 20), rng.uniform(-1, 1, 20)
    Psi, Pc = bspline_design(s1, u), bspline_design(s2, a)
    T = tensor_design(Psi, Pc)
    np.testing.assert_allclose(T.sum(axis=1), 1.0, atol=1e-12)
    theta = rng.standard_normal((6, 5))
    oracle = np.zeros(20)
    for i in range(20):
        b1, b2 = oracle_basis(s1, u[i]), oracle_basis(s2, a[i])
        for r in range(6):
            for s in range(5):
                oracle[i] += b1[r] * b2[s] * theta[r, s]
    np.testing.assert_allclose(T @ theta.ravel(), oracle, atol=1e-12)
    with pytest.raises(DataValidationError):
        tensor_design(Psi, Pc[:3])


def _design(n, rng, d=8):
    u = np.sort(rng.uniform(0, 1, n))
    spec = BasisSpec.from_values(u, d=d)
    P = difference_penalty(d, 2)
    return u, bspline_design(spec, u), P.T @ P


def test_unpenalized_interpolation(rng):
    u, D, S = _design(8, rng)
    Y = rng.standard_normal(8)
    fit = penalized_fit(D, Y, [S], [0.0])
    np.testing.assert_allclose(fit.fitted, Y, atol=1e-10)
    assert fit.edf == pytest.approx(8, abs=1e-8)
    with pytest.raises(NumericalError, match="positive smoothing parameter"):
        penalized_fit(D[:4], Y[:4], [S], [0.0])


def test_normal_equations_and_edf_bounds(rng):
    u, D, S = _design(60, rng)
    Y = np.sin(4 * u) + rng.standard_normal(60) * 0.3
    for lam in (0.0, 0.1, 10.0, 1e4):
        fit = penalized_fit(D, Y, [S], [lam])
        resid = D.T @ Y - (D.T @ D + lam * S) @ fit.coef
        assert np.linalg.norm(resid) <= 1e-8 * np.linalg.norm(D.T @ Y)
        assert 0 <= fit.edf <= min(60, 8)


def test_large_lambda_reaches_null_space_fit(rng):
    u, D, S = _design(80, rng)
    Y = np.exp(u) + rng.standard_normal(80) * 0.1
    fit = penalized_fit(D, Y, [S], [1e12])
    N = D @ np.column_stack([np.ones(8), np.arange(8.0)])
    c, *_ = np.linalg.lstsq(N, Y, rcond=None)
    assert np.sqrt(np.mean((fit.fitted - N @ c) ** 2)) < 1e-4
    assert fit.edf == pytest.approx(2, abs=1e-3)


def test_hat_idempotence(rng):
    u, D, S = _design(40, rng)
    Y = rng.standard_normal(40)
    fit = penalized_fit(D, Y, [S], [0.0])
    again = penalized_fit(D, fit.fitted, [S], [0.0])
    np.testing.assert_allclose(again.fitted, fit.fitted, atol=1e-10)
    assert fit.edf == pytest.approx(np.linalg.matrix_rank(D), abs=1e-8)


def test_gcv_prefers_smoothing_for_noise():
    chosen = []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        u, D, S = _design(200, rng)
        chosen.append(select_lambda(D, rng.standard_normal(200), [S])[0])
    assert np.median(chosen) >= 1e3


def test_gcv_small_lambda_for_smooth_truth(rng):
    u, D, S = _design(200, rng)
    truth = D @ np.array([0.0, 1.0, -1.0, 2.0, 0.5, -2.0, 1.0, 0.0])
    lam = select_lambda(D, truth, [S])
    assert lam[0] <= 1e-3
    fit = penalized_fit(D, truth, [S], lam)
    assert np.mean((fit.fitted - truth) ** 2) < 1e-6


def test_gcv_grid_edge_cases(rng):
    u, D, S = _design(50, rng)
    Y = np.sin(6 * u) + 0.3 * rng.standard_normal(50)
    assert select_lambda(D, Y, [S], grid=[0.3])[0] == 0.3
    base = select_lambda(D, Y, [S])
    for c in (-3.0, 0.01, 250.0):
        np.testing.assert_array_equal(select_lambda(D, c * Y, [S]), base)
    with pytest.warns(UserWarning, match="flat"):
        lam = select_lambda(D, np.zeros(50), [S])
    assert lam[0] == default_lambda_grid()[0]


def test_multiple_penalties_shapes(rng):
    u, D, S = _design(50, rng)
    D2 = bspline_design(BasisSpec.from_values(u ** 2), u ** 2)
    prob = PenalizedProblem(np.hstack([D, D2[:, 1:]]), rng.standard_normal(50),
                            [np.pad(S, ((0, 7), (0, 7))), np.pad(S[1:, 1:], ((8, 0), (8, 0)))])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        lam = prob.select(n_passes=1)
    assert lam.shape == (2,)
    with pytest.raises(DataValidationError):
        prob.fit([1.0])
    with pytest.raises(DataValidationError):
        prob.fit([1.0, -1.0])


def test_basis_json_round_trip():
    assert BasisSpec.from_dict(SPEC.to_dict()) == SPEC
