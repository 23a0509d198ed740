import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from mfkinv.core import (
    Ensemble,
    GaussianBelief,
    InverseProblem,
    ensemble_moments,
    gaussian_posterior_linear,
    relative_error,
    sample_gaussian,
    spd_sqrt,
)
from mfkinv.errors import DegenerateEnsemble, NotSPD, SingularPrecision
from mfkinv.problems import linear_problem

from conftest import exact_posterior_2d, kalman_form_posterior, random_spd


def test_spd_sqrt_identity():
    np.testing.assert_array_equal(spd_sqrt(np.eye(3)), np.eye(3))


def test_spd_sqrt_diagonal():
    np.testing.assert_allclose(spd_sqrt(np.diag([4.0, 9.0])), np.diag([2.0, 3.0]))


def test_spd_sqrt_reconstructs_2x2():
    C = np.array([[2.0, 1.0], [1.0, 2.0]])
    L = spd_sqrt(C)
    assert np.allclose(np.triu(L, 1), 0.0)
    np.testing.assert_allclose(L @ L.T, C, atol=1e-12)


def test_spd_sqrt_jitters_roundoff_negative():
    v = np.array([1.0, 1.0]) / np.sqrt(2)
    C = np.outer(v, v) - 1e-16 * np.eye(2)
    L = spd_sqrt(C)
    assert np.all(np.isfinite(L))
    assert relative_error(L @ L.T, np.outer(v, v)) < 1e-10


def test_spd_sqrt_rejects_indefinite():
    with pytest.raises(NotSPD):
        spd_sqrt(np.diag([1.0, -1.0]))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 8), st.integers(0, 2**32 - 1), st.floats(1.0, 1e6))
def test_spd_sqrt_property(n, seed, cond):
    C = random_spd(np.random.default_rng(seed), n, cond)
    L = spd_sqrt(C)
    assert relative_error(L @ L.T, C) < 1e-10


def test_ensemble_moments_two_particles():
    m, C = ensemble_moments(Ensemble(np.array([[0.0, 2.0]])))
    np.testing.assert_allclose(m, [1.0])
    np.testing.assert_allclose(C, [[2.0]])


def test_ensemble_moments_identical_particles():
    _, C = ensemble_moments(Ensemble(np.ones((3, 4))))
    np.testing.assert_array_equal(C, np.zeros((3, 3)))


def test_ensemble_moments_three_particles():
    m, C = ensemble_moments(Ensemble(np.array([[0.0, 1.0, 2.0]])))
    np.testing.assert_allclose(m, [1.0])
    np.testing.assert_allclose(C, [[1.0]])


def test_ensemble_requires_two_particles():
    with pytest.raises(DegenerateEnsemble):
        Ensemble(np.zeros((2, 1)))
    with pytest.raises(DegenerateEnsemble):
        ensemble_moments(np.zeros((2, 1)))


def test_sqrt_factor_reproduces_covariance(rng):
    E = Ensemble(rng.standard_normal((4, 7)))
    Z = E.sqrt_factor
    np.testing.assert_allclose(Z @ Z.T, np.cov(E.particles), atol=1e-14)
    np.testing.assert_allclose(E.mean, E.particles.mean(axis=1))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 6), elements=st.floats(-1e3, 1e3)), st.permutations(range(6)))
def test_ensemble_moments_permutation_invariant(P, perm):
    m1, C1 = ensemble_moments(Ensemble(P))
    m2, C2 = ensemble_moments(Ensemble(P[:, list(perm)]))
    np.testing.assert_allclose(m1, m2, rtol=1e-12, atol=1e-9)
    np.testing.assert_allclose(C1, C2, rtol=1e-10, atol=1e-6)


def test_posterior_equal_precision_case():
    prob = InverseProblem(lambda t: t, np.zeros(3), np.eye(3), np.zeros(3), np.eye(3))
    post = gaussian_posterior_linear(np.eye(3), prob)
    np.testing.assert_allclose(post.mean, 0.0, atol=1e-15)
    np.testing.assert_allclose(post.covariance, 0.5 * np.eye(3))


@pytest.mark.parametrize(
    "variant, G, y",
    [("over", [[1, 2], [3, 4], [5, 6]], [3, 7, 10]), ("under", [[1, 2]], [3])],
)
def test_posterior_linear_golden(variant, G, y):
    # exact rational arithmetic oracle
    mean, cov = exact_posterior_2d(G, y, "0.01")
    prob = linear_problem(variant)
    post = gaussian_posterior_linear(prob.metadata["G"], prob)
    np.testing.assert_allclose(post.mean, mean, rtol=1e-12)
    np.testing.assert_allclose(post.covariance, cov, rtol=1e-10, atol=1e-14)


def test_posterior_linear_frozen_values():
    over = gaussian_posterior_linear(linear_problem("over").metadata["G"], linear_problem("over"))
    # precision [[3501, 4400], [4400, 5601]], det 249101, rhs (7400, 9400)
    np.testing.assert_allclose(over.mean, [87400 / 249101, 349400 / 249101], rtol=1e-12)
    np.testing.assert_allclose(over.covariance, np.array([[5601, -4400], [-4400, 3501]]) / 249101, rtol=1e-10)
    under = gaussian_posterior_linear(linear_problem("under").metadata["G"], linear_problem("under"))
    np.testing.assert_allclose(under.mean, [3 / 5.01, 6 / 5.01], rtol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_posterior_normal_equations(n, ny, seed):
    r = np.random.default_rng(seed)
    G = r.standard_normal((ny, n))
    prob = InverseProblem(
        lambda t: G @ t, r.standard_normal(ny), random_spd(r, ny), r.standard_normal(n), random_spd(r, n)
    )
    post = gaussian_posterior_linear(G, prob)
    resid = G.T @ np.linalg.solve(prob.noise_cov, prob.y - G @ post.mean) - np.linalg.solve(
        prob.prior_cov, post.mean - prob.prior_mean
    )
    scale = np.linalg.norm(G.T @ np.linalg.solve(prob.noise_cov, prob.y)) + 1.0
    assert np.linalg.norm(resid) / scale < 1e-10
    m_ref, C_ref = kalman_form_posterior(G, prob.y, prob.noise_cov, prob.prior_mean, prob.prior_cov)
    assert relative_error(post.mean, m_ref) < 1e-9
    assert relative_error(post.covariance, C_ref) < 1e-9


def test_posterior_singular_precision():
    prob = InverseProblem(lambda t: t, np.zeros(2), np.eye(2), np.zeros(2), np.diag([1.0, 1e20]))
    with pytest.raises(SingularPrecision):
        gaussian_posterior_linear(np.diag([1e10, 0.0]), prob)


def test_inverse_problem_rejects_non_spd():
    with pytest.raises(NotSPD):
        InverseProblem(lambda t: t, np.zeros(2), -np.eye(2), np.zeros(2), np.eye(2))


def test_inverse_problem_misfits():
    prob = linear_problem("under")
    theta = np.array([1.0, 1.0])
    assert prob.misfit(theta) == pytest.approx(0.0)
    assert prob.regularized_misfit(theta) == pytest.approx(1.0)


def test_belief_shape_check():
    with pytest.raises(ValueError):
        GaussianBelief(np.zeros(2), np.eye(3))


def test_belief_is_immutable():
    b = GaussianBelief(np.zeros(2), np.eye(2))
    with pytest.raises(ValueError):
        b.mean[0] = 1.0


def test_sample_gaussian_shape_and_seed():
    b = GaussianBelief(np.array([1.0, -1.0]), np.diag([1.0, 4.0]))
    a = sample_gaussian(b, 5, np.random.default_rng(3))
    c = sample_gaussian(b, 5, np.random.default_rng(3))
    assert a.shape == (2, 5)
    np.testing.assert_array_equal(a, c)


def test_relative_error_zero_reference():
    assert relative_error(np.array([3.0, 4.0]), np.zeros(2)) == pytest.approx(5.0)
