import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rejectkit.detectors import SVMRBFModel, fit_svm_rbf, kkt_violations, smo_binary
from rejectkit.detectors.svm import select_svm_params
from rejectkit.errors import TrainingError
from rejectkit.mathutils import finite_difference_gradient, rbf_kernel_matrix

from svm_oracles import dual_value, enumeration_oracle, qp_oracle


def _problem(seed, n=12, d=2, gamma=1.0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, d))
    y = np.where(rng.random(n) < 0.5, -1.0, 1.0)
    y[0], y[1] = 1.0, -1.0
    return rbf_kernel_matrix(X, X, gamma), y


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("C", [0.1, 1.0, 10.0])
def test_dual_objective_matches_qp_solver(seed, C):
    K, y = _problem(seed)
    sol = smo_binary(K, y, C, tol=1e-8)
    ref = dual_value(K, y, qp_oracle(K, y, C))
    ours = sol.dual_objective(K, y)
    assert abs(ours - ref) / max(1.0, abs(ref)) < 1e-6


@pytest.mark.parametrize("seed", range(6))
def test_four_point_problem_matches_enumeration(seed):
    K, y = _problem(seed, n=4, gamma=0.7)
    sol = smo_binary(K, y, 1.0, tol=1e-10)
    best = enumeration_oracle(K, y, 1.0)
    assert sol.dual_objective(K, y) == pytest.approx(best, abs=1e-9)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([0.5, 1.0, 5.0]))
def test_solution_feasible_and_kkt(seed, C):
    K, y = _problem(seed, n=15)
    tol = 1e-3
    sol = smo_binary(K, y, C, tol=tol, polish=False)
    assert abs(y @ sol.alpha) < 1e-9
    assert sol.alpha.min() >= 0 and sol.alpha.max() <= C
    assert kkt_violations(K, y, C, sol.alpha, sol.rho).max() <= tol + 1e-9


def test_polish_never_lowers_objective():
    K, y = _problem(3, n=20)
    a = smo_binary(K, y, 1.0, polish=False)
    b = smo_binary(K, y, 1.0, polish=True)
    assert b.dual_objective(K, y) >= a.dual_objective(K, y) - 1e-12


def test_non_convergence_reported():
    K, y = _problem(0, n=30)
    with pytest.raises(TrainingError, match="did not converge"):
        smo_binary(K, y, 10.0, tol=1e-12, max_iter=2)


def test_multiclass_fit_and_support_vectors(toy_svm, blobs):
    assert (toy_svm.scores(blobs.X).argmax(1) == blobs.y).mean() > 0.97
    assert 0 < toy_svm.prototype_count <= len(blobs.X)
    assert toy_svm.dual_coefs.shape == (3, toy_svm.prototype_count)
    assert np.all(np.any(toy_svm.dual_coefs != 0, axis=0))


def test_scores_equal_decision_function(blobs):
    model, sols, K = fit_svm_rbf(blobs.X, blobs.y, C=1.0, gamma=1.0, return_solutions=True)
    yk = np.where(blobs.y == 1, 1.0, -1.0)
    f = K @ (sols[1].alpha * yk) - sols[1].rho
    np.testing.assert_allclose(model.scores(blobs.X)[:, 1], f, atol=1e-10)


def test_input_gradient(toy_svm, rng):
    z = rng.uniform(0, 1, 2)
    U = rng.normal(size=3)
    fd = finite_difference_gradient(lambda v: U @ toy_svm.scores(v), z, h=1e-6)
    np.testing.assert_allclose(toy_svm.score_grad(z, U), fd, rtol=1e-5, atol=1e-8)


def test_degenerate_labels():
    with pytest.raises(ValueError, match="degenerate"):
        fit_svm_rbf(np.zeros((4, 2)), np.zeros(4, int))


def test_absent_class_gets_constant_score(blobs):
    m = fit_svm_rbf(blobs.X, blobs.y, n_classes=4)
    np.testing.assert_allclose(m.scores(blobs.X)[:, 3], -1.0)


def test_gamma_scale():
    m = SVMRBFModel(np.zeros((1, 2)), np.ones((2, 1)), np.zeros(2), 2.0, 1.0)
    assert m.with_gamma_scale(0.25).gamma == 0.5
    with pytest.raises(ValueError):
        SVMRBFModel(np.zeros((1, 2)), np.ones((2, 1)), np.zeros(2), -1.0, 1.0)


def test_parameter_selection_needs_nonlinear_kernel():
    rng = np.random.default_rng(0)
    X = rng.random((300, 2))
    y = (((X - 0.5) ** 2).sum(1) < 0.1).astype(int)
    C, g, table = select_svm_params(X, y, C_grid=(1.0,), gamma_grid=(1e-4, 10.0))
    assert g == 10.0
    assert table[(1.0, 10.0)] > 0.9 > table[(1.0, 1e-4)]


def test_parameter_selection_ties_go_to_first(blobs):
    C, g, table = select_svm_params(blobs.X, blobs.y, C_grid=(1.0, 10.0), gamma_grid=(1e-2, 1.0))
    assert len(set(table.values())) == 1
    assert (C, g) == (1.0, 1e-2)
