import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mfkinv.core import Ensemble, GaussianBelief, InverseProblem, gaussian_posterior_linear, relative_error
from mfkinv.errors import DegenerateEnsemble, InvalidConfig, RankDeficient
from mfkinv.meanfield import build_augmented
from mfkinv.methods import (
    MethodState,
    RunConfig,
    eakf_update,
    eki_step,
    enkf_update,
    etkf_update,
    run,
    sigma_points_uki1,
    sigma_points_uki2,
    uki1_directions,
    uki_step,
)
from mfkinv.problems import hilbert_problem, linear_problem

from conftest import random_spd


def _weighted_cov(sp):
    d = sp.points[:, 1:] - sp.points[:, :1]
    return sp.weight * d @ d.T


def test_uki1_one_dimensional_points():
    sp = sigma_points_uki1(np.zeros(1), np.eye(1))
    assert sp.weight == pytest.approx(1 / 8)
    np.testing.assert_allclose(sp.points, [[0.0, -2.0, 2.0]])


def test_uki1_two_dimensional_directions():
    I, a = uki1_directions(2)
    assert a == pytest.approx(1 / 6)
    # hand expansion: first row from I_1 = [-1, 1]/sqrt(2a), second row 1/sqrt(6a) with corner -2/sqrt(6a)
    expected = np.array([[-np.sqrt(3), np.sqrt(3), 0.0], [1.0, 1.0, -2.0]])
    np.testing.assert_allclose(I, expected, atol=1e-14)
    np.testing.assert_allclose(a * I @ I.T, np.eye(2), atol=1e-14)


def test_uki2_one_dimensional_points():
    sp = sigma_points_uki2(np.array([3.0]), np.array([[4.0]]))
    assert sp.weight == 0.5
    np.testing.assert_allclose(sp.points, [[3.0, 5.0, 1.0]])


def test_uki2_four_dimensional_offsets():
    C = np.diag([1.0, 4.0, 9.0, 16.0])
    sp = sigma_points_uki2(np.zeros(4), C)
    assert sp.weight == 1 / 8 and sp.J == 9
    np.testing.assert_allclose(sp.points[:, 1:5], 2.0 * np.sqrt(C))
    np.testing.assert_allclose(sp.points[:, 5:], -2.0 * np.sqrt(C))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.integers(0, 10**6), st.sampled_from(["uki1", "uki2"]))
def test_sigma_points_reproduce_moments(n, seed, variant):
    r = np.random.default_rng(seed)
    m = r.standard_normal(n)
    C = random_spd(r, n, 100.0)
    sp = (sigma_points_uki1 if variant == "uki1" else sigma_points_uki2)(m, C)
    assert sp.J == (n + 2 if variant == "uki1" else 2 * n + 1)
    np.testing.assert_array_equal(sp.points[:, 0], m)
    assert relative_error(_weighted_cov(sp), C) < 1e-10
    # directions sum to zero, so the weighted mean of the spread points is m
    np.testing.assert_allclose(sp.points[:, 1:].mean(axis=1), m, atol=1e-10 * (1 + np.abs(m).max()))


def _posterior(prob):
    return gaussian_posterior_linear(prob.metadata["G"], prob)


@pytest.mark.parametrize("variant", ["uki1", "uki2"])
@pytest.mark.parametrize("problem", ["over", "under"])
def test_uki_linear_convergence(variant, problem):
    prob = linear_problem(problem)
    post = _posterior(prob)
    state, hist = run(variant, prob, RunConfig(iterations=30, reference=post))
    assert len(hist) == 30
    assert hist[-1].mean_rel_err < 1e-6 and hist[-1].cov_rel_err < 1e-6
    step_evals = 4 if variant == "uki1" else 5
    assert [h.fwd_evals for h in hist] == [step_evals * (i + 1) for i in range(30)]


@pytest.mark.parametrize("gamma", [0.5, 1.0, 2.0])
def test_uki_precision_recursion(gamma):
    prob = linear_problem("over")
    G = prob.metadata["G"]
    P_post = G.T @ np.linalg.solve(prob.noise_cov, G) + np.linalg.inv(prob.prior_cov)
    state = MethodState(belief=prob.prior)
    system = build_augmented(prob, gamma)
    C_prev_inv = np.linalg.inv(prob.prior_cov)
    for _ in range(10):
        state = uki_step(state, system, "uki2")
        expected = gamma / (gamma + 1) * P_post + C_prev_inv / (gamma + 1)
        got = np.linalg.inv(state.belief.covariance)
        assert relative_error(got, expected) < 1e-8
        C_prev_inv = got


@pytest.mark.parametrize("variant", ["uki1", "uki2"])
def test_uki_posterior_fixed_point(variant):
    prob = linear_problem("over")
    post = _posterior(prob)
    state = uki_step(MethodState(belief=post), build_augmented(prob), variant)
    assert relative_error(state.belief.mean, post.mean) < 1e-10
    assert relative_error(state.belief.covariance, post.covariance) < 1e-10


def test_uki_zero_residual_fixed_point():
    prob = InverseProblem(lambda t: t, np.zeros(2), np.eye(2), np.zeros(2), np.eye(2))
    state, hist = run("uki2", prob, RunConfig(iterations=5))
    assert all(np.array_equal(h.mean, np.zeros(2)) for h in hist)


def test_uki_monotone_geometric_covariance_decay():
    prob = linear_problem("over")
    post = _posterior(prob)
    for gamma in (0.5, 1.0, 3.0):
        _, hist = run("uki2", prob, RunConfig(gamma=gamma, iterations=25))
        errs = [np.linalg.norm(prob.prior_cov - post.covariance)] + [
            np.linalg.norm(h.covariance - post.covariance) for h in hist
        ]
        for a, b in zip(errs, errs[1:]):
            assert b <= a / (gamma + 1) + 1e-8


def test_run_zero_iterations_returns_prior():
    prob = linear_problem("over")
    state, hist = run("uki1", prob, RunConfig(iterations=0))
    assert hist == []
    np.testing.assert_array_equal(state.mean, prob.prior_mean)
    np.testing.assert_array_equal(state.covariance, prob.prior_cov)


def test_run_rejects_unknown_method_and_missing_J():
    prob = linear_problem("over")
    with pytest.raises(InvalidConfig):
        run("ukf", prob)
    with pytest.raises(InvalidConfig):
        run("eaki", prob, RunConfig(J=None))


def test_iteration_increments_by_one():
    _, hist = run("eaki", linear_problem("over"), RunConfig(J=6, iterations=7))
    assert [h.iter for h in hist] == list(range(1, 8))


def test_eki_reproducible_under_seed():
    prob = linear_problem("over")
    _, h1 = run("eki", prob, RunConfig(J=10, seed=4, iterations=10))
    _, h2 = run("eki", prob, RunConfig(J=10, seed=4, iterations=10))
    _, h3 = run("eki", prob, RunConfig(J=10, seed=5, iterations=10))
    assert all(np.array_equal(a.mean, b.mean) for a, b in zip(h1, h2))
    assert not np.array_equal(h1[-1].mean, h3[-1].mean)


def test_enkf_zero_innovation_leaves_particles():
    class ZeroRng:
        def standard_normal(self, shape):
            return np.zeros(shape)

    P = np.tile(np.array([[1.0], [2.0]]), (1, 4))
    outputs = np.tile(np.array([[5.0]]), (1, 4))
    new, _ = enkf_update(P, outputs, np.array([5.0]), np.eye(1), ZeroRng())
    np.testing.assert_array_equal(new, P)


def test_eki_step_degenerate():
    with pytest.raises(DegenerateEnsemble):
        enkf_update(np.zeros((2, 1)), np.zeros((1, 1)), np.zeros(1), np.eye(1), np.random.default_rng(0))


@pytest.mark.parametrize("update", [eakf_update, etkf_update])
def test_square_root_rank_zero(update):
    P = np.ones((3, 5))
    with pytest.raises(RankDeficient):
        update(P, np.ones((2, 5)), np.zeros(2), np.eye(2))


def _kalman_from_ensemble(P, X, obs, noise):
    J = P.shape[1]
    m, xb = P.mean(1), X.mean(1)
    dP, dX = P - m[:, None], X - xb[:, None]
    C = dP @ dP.T / (J - 1)
    Ctx = dP @ dX.T / (J - 1)
    Cxx = dX @ dX.T / (J - 1) + noise
    K = Ctx @ np.linalg.inv(Cxx)
    return m + K @ (obs - xb), C - K @ Ctx.T


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(2, 12), st.integers(1, 5), st.integers(0, 10**6))
def test_square_root_updates_match_kalman_moments(n, J, ny, seed):
    r = np.random.default_rng(seed)
    P = r.standard_normal((n, J))
    W = r.standard_normal((ny, n))
    X = np.tanh(W @ P) + 0.3 * (W @ P)
    obs = r.standard_normal(ny)
    noise = random_spd(r, ny, 10.0)
    m_ref, C_ref = _kalman_from_ensemble(P, X, obs, noise)
    for update in (eakf_update, etkf_update):
        new, _ = update(P, X, obs, noise)
        E = Ensemble(new)
        assert np.linalg.norm(E.mean - m_ref) <= 1e-8 * (1 + np.linalg.norm(m_ref))
        assert np.linalg.norm(E.covariance - C_ref) <= 1e-8 * (1 + np.linalg.norm(C_ref))


@pytest.mark.parametrize("method", ["eaki", "etki"])
def test_subspace_property_small_ensemble(method):
    # J < N_theta, so the initial span is a proper subspace
    prob = hilbert_problem(10)
    _, hist = run(method, prob, RunConfig(J=5, iterations=20, seed=2, keep_particles=True))
    state0, _ = run(method, prob, RunConfig(J=5, iterations=0, seed=2))
    P0 = state0.ensemble.particles
    m0 = P0.mean(1)
    Q, _ = np.linalg.qr(P0 - m0[:, None])
    for h in hist:
        D = h.particles - m0[:, None]
        resid = D - Q @ (Q.T @ D)
        assert np.linalg.norm(resid) < 1e-8 * max(np.linalg.norm(D), 1.0)


@pytest.mark.parametrize("method", ["eaki", "etki"])
def test_square_root_linear_convergence(method):
    prob = linear_problem("over")
    post = _posterior(prob)
    _, hist = run(method, prob, RunConfig(J=10, iterations=30, exact_init=True, reference=post))
    assert hist[-1].mean_rel_err < 1e-6 and hist[-1].cov_rel_err < 1e-6


def test_eki_step_count_and_state_type():
    prob = linear_problem("over")
    state, _ = run("eki", prob, RunConfig(J=8, iterations=0))
    new = eki_step(state, build_augmented(prob), np.random.default_rng(0))
    assert new.iteration == 1 and new.fwd_evals == 8 and new.ensemble.J == 8


def test_divergence_is_flagged_and_halts():
    prob = InverseProblem(lambda t: np.exp(50 * t), np.array([1e300]), np.eye(1), np.zeros(1), np.eye(1))
    state, hist = run("uki2", prob, RunConfig(iterations=30))
    assert state.diverged
    assert len(hist) < 30


def test_opt_error_at_prior_mean():
    prob = linear_problem("under")
    state, hist = run("uki2", prob, RunConfig(iterations=1))
    # predicted output is at the inflated center, which equals the previous mean (the prior mean)
    expected = 0.5 * float(prob.y @ prob.y) / 0.01 + 0.5 * float(hist[0].mean @ hist[0].mean)
    assert hist[0].opt_err == pytest.approx(expected)
