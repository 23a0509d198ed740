"""UKI-1/UKI-2, EKI, EAKI and ETKI applied to the augmented mean-field system.

Each ``*_step`` performs one prediction (inflation) plus one analysis step
and returns a new :class:`MethodState`.  The analysis kernels
(``ukf_update``, ``enkf_update``, ``eakf_update``, ``etkf_update``) take the
observation vector and noise covariance explicitly so the transport filters
in :mod:`mfkinv.baselines` can reuse them unchanged.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
import scipy.linalg as sla

from mfkinv.core import (
    Ensemble,
    GaussianBelief,
    InverseProblem,
    relative_error,
    sample_gaussian,
    spd_sqrt,
    symmetrize,
)
from mfkinv.errors import (
    DegenerateEnsemble,
    Divergence,
    InvalidConfig,
    RankDeficient,
    SingularInnovation,
)
from mfkinv.meanfield import AugmentedSystem, build_augmented, inflate, inflate_ensemble

UKI_VARIANTS = ("uki1", "uki2")
ENSEMBLE_METHODS = ("eki", "eaki", "etki")
METHODS = UKI_VARIANTS + ENSEMBLE_METHODS

RANK_CUTOFF = 1e-12


# --------------------------------------------------------------------------
# sigma points
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SigmaPoints:
    """Quadrature nodes (columns, node 0 is the mean) and their common weight."""

    points: np.ndarray
    weight: float
    variant: str

    @property
    def J(self) -> int:
        return self.points.shape[1]


def uki1_directions(n: int) -> tuple[np.ndarray, float]:
    """Simplex direction matrix of shape ``(n, n+1)`` and weight ``n/(4(n+1))``."""
    a = n / (4.0 * (n + 1))
    I = np.array([[-1.0, 1.0]]) / np.sqrt(2 * a)
    for d in range(2, n + 1):
        c = 1.0 / np.sqrt(a * d * (d + 1))
        top = np.hstack([I, np.zeros((d - 1, 1))])
        bottom = np.full((1, d + 1), c)
        bottom[0, -1] = -d * c
        I = np.vstack([top, bottom])
    return I, a


def uki2_directions(n: int) -> tuple[np.ndarray, float]:
    """Symmetric directions ``[+e_i, -e_i]/sqrt(2a)`` and weight ``max(1/8, 1/(2n))``."""
    a = max(1.0 / 8.0, 1.0 / (2.0 * n))
    eye = np.eye(n) / np.sqrt(2 * a)
    return np.hstack([eye, -eye]), a


def _sigma_points(m, C, directions, variant) -> SigmaPoints:
    m = np.asarray(m, dtype=float)
    I, a = directions(m.size)
    L = spd_sqrt(C)
    pts = np.hstack([m[:, None], m[:, None] + L @ I])
    return SigmaPoints(points=pts, weight=a, variant=variant)


def sigma_points_uki1(m: np.ndarray, C: np.ndarray) -> SigmaPoints:
    return _sigma_points(m, C, uki1_directions, "uki1")


def sigma_points_uki2(m: np.ndarray, C: np.ndarray) -> SigmaPoints:
    return _sigma_points(m, C, uki2_directions, "uki2")


def sigma_points(m, C, variant: str) -> SigmaPoints:
    if variant in ("uki1", "iukf1"):
        return sigma_points_uki1(m, C)
    if variant in ("uki2", "iukf2"):
        return sigma_points_uki2(m, C)
    raise InvalidConfig(f"unknown sigma-point variant {variant!r}")


# --------------------------------------------------------------------------
# analysis kernels
# --------------------------------------------------------------------------

def _factor_innovation(c_xx: np.ndarray):
    try:
        return sla.cho_factor(symmetrize(c_xx), lower=True)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise SingularInnovation("innovation covariance is not SPD") from exc


def kalman_gain(c_tx: np.ndarray, c_xx: np.ndarray) -> np.ndarray:
    """``c_tx @ inv(c_xx)`` via a Cholesky solve."""
    return sla.cho_solve(_factor_innovation(c_xx), c_tx.T).T


def ukf_update(
    sp: SigmaPoints,
    outputs: np.ndarray,
    obs: np.ndarray,
    noise_cov: np.ndarray,
    spread_center: str = "node",
):
    """Quadrature Kalman analysis; returns ``(mean, cov, predicted_obs)``.

    The predicted observation is the output at the center node. Output
    deviations are taken about that node (``spread_center="node"``) or about
    the mean of the outer nodes (``"outer"``); the latter cancels any offset
    shared by the outer evaluations, e.g. a low-fidelity model bias.
    """
    if spread_center not in ("node", "outer"):
        raise InvalidConfig(f"spread_center must be 'node' or 'outer', got {spread_center!r}")
    m = sp.points[:, 0]
    dtheta = sp.points[:, 1:] - m[:, None]
    x_hat = outputs[:, 0]
    ref = x_hat if spread_center == "node" else outputs[:, 1:].mean(axis=1)
    dx = outputs[:, 1:] - ref[:, None]
    a = sp.weight
    c_hat = a * dtheta @ dtheta.T
    c_tx = a * dtheta @ dx.T
    c_xx = a * dx @ dx.T + noise_cov
    K = kalman_gain(c_tx, c_xx)
    mean = m + K @ (obs - x_hat)
    cov = symmetrize(c_hat - K @ c_tx.T)
    return mean, cov, x_hat


def _deviations(particles: np.ndarray, outputs: np.ndarray):
    J = particles.shape[1]
    if J < 2:
        raise DegenerateEnsemble(f"ensemble needs J >= 2 particles, got {J}")
    m = particles.mean(axis=1)
    x_bar = outputs.mean(axis=1)
    s = np.sqrt(J - 1.0)
    return m, (particles - m[:, None]) / s, x_bar, (outputs - x_bar[:, None]) / s


def enkf_update(particles, outputs, obs, noise_cov, rng: np.random.Generator):
    """Perturbed-observation update; noise enters the particle update, not ``outputs``."""
    m, Z, x_bar, Y = _deviations(particles, outputs)
    K = kalman_gain(Z @ Y.T, Y @ Y.T + noise_cov)
    J = particles.shape[1]
    nu = spd_sqrt(noise_cov) @ rng.standard_normal((obs.size, J))
    return particles + K @ (obs[:, None] - outputs - nu), x_bar


def _mean_update(m, Z, x_bar, Y, obs, noise_cov):
    K = kalman_gain(Z @ Y.T, Y @ Y.T + noise_cov)
    return m + K @ (obs - x_bar)


def eakf_update(particles, outputs, obs, noise_cov):
    """Adjustment square-root update with pre-multiplier A."""
    m, Z, x_bar, Y = _deviations(particles, outputs)
    m_new = _mean_update(m, Z, x_bar, Y, obs, noise_cov)
    P, s, Vt = np.linalg.svd(Z, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        raise RankDeficient("ensemble has zero spread")
    r = int(np.sum(s > RANK_CUTOFF * s[0]))
    P, s, V = P[:, :r], s[:r], Vt[:r].T
    J = particles.shape[1]
    B = np.eye(J) + Y.T @ sla.cho_solve(_factor_innovation(noise_cov), Y)
    M = symmetrize(V.T @ np.linalg.solve(B, V))
    D, U = np.linalg.eigh(M)
    D = np.clip(D, 0.0, None)
    A = (P * s) @ (U * np.sqrt(D)) @ (P / s).T
    return m_new[:, None] + A @ (particles - m[:, None]), x_bar


def etkf_update(particles, outputs, obs, noise_cov):
    """Transform square-root update with symmetric post-multiplier T."""
    m, Z, x_bar, Y = _deviations(particles, outputs)
    if not np.any(Z):
        raise RankDeficient("ensemble has zero spread")
    m_new = _mean_update(m, Z, x_bar, Y, obs, noise_cov)
    S = symmetrize(Y.T @ sla.cho_solve(_factor_innovation(noise_cov), Y))
    gam, P = np.linalg.eigh(S)
    gam = np.clip(gam, 0.0, None)
    T = (P / np.sqrt(gam + 1.0)) @ P.T
    J = particles.shape[1]
    return m_new[:, None] + np.sqrt(J - 1.0) * (Z @ T), x_bar


# --------------------------------------------------------------------------
# state and steps
# --------------------------------------------------------------------------

@dataclass
class IterationRecord:
    iter: int
    mean_rel_err: float
    cov_rel_err: float
    opt_err: float
    fwd_evals: int
    wall_ms: float
    mean: np.ndarray
    covariance: np.ndarray
    fwd_evals_hi: int = 0
    fwd_evals_lo: int = 0
    particles: Optional[np.ndarray] = None
    diverged: bool = False


@dataclass
class MethodState:
    """Belief (UKI, IUKF) or ensemble (everything else) plus bookkeeping."""

    belief: Optional[GaussianBelief] = None
    ensemble: Optional[Ensemble] = None
    iteration: int = 0
    history: list = field(default_factory=list)
    predicted: Optional[np.ndarray] = None
    fwd_evals: int = 0
    fwd_evals_hi: int = 0
    fwd_evals_lo: int = 0
    diverged: bool = False
    message: str = ""

    @property
    def mean(self) -> np.ndarray:
        return self.belief.mean if self.belief is not None else self.ensemble.mean

    @property
    def covariance(self) -> np.ndarray:
        return self.belief.covariance if self.belief is not None else self.ensemble.covariance

    def moments(self) -> GaussianBelief:
        return self.belief if self.belief is not None else self.ensemble.belief()

    def advanced(self, counts, **changes) -> "MethodState":
        hi, lo = counts
        return replace(
            self,
            iteration=self.iteration + 1,
            fwd_evals=self.fwd_evals + hi + lo,
            fwd_evals_hi=self.fwd_evals_hi + hi,
            fwd_evals_lo=self.fwd_evals_lo + lo,
            **changes,
        )


def uki_step(state: MethodState, system: AugmentedSystem, variant: str = "uki2", jobs: int = 1) -> MethodState:
    predicted = inflate(state.belief, system.gamma)
    sp = sigma_points(predicted.mean, predicted.covariance, variant)
    outputs, counts = system.evaluate(sp.points, jobs=jobs, bifidelity=True)
    center = "node"
    if system.problem.forward_lo is not None:
        center = system.problem.metadata.get("bifidelity_center", "node")
    mean, cov, x_hat = ukf_update(sp, outputs, system.x, system.sigma_nu, center)
    return state.advanced(counts, belief=GaussianBelief(mean, cov), predicted=x_hat)


def _ensemble_forward(state: MethodState, system: AugmentedSystem, jobs: int):
    if system.problem.forward_lo is not None:
        raise InvalidConfig("bi-fidelity evaluation is only defined for UKI variants")
    predicted = inflate_ensemble(state.ensemble, system.gamma)
    outputs, counts = system.evaluate(predicted.particles, jobs=jobs)
    return predicted.particles, outputs, counts


def eki_step(state: MethodState, system: AugmentedSystem, rng: np.random.Generator, jobs: int = 1) -> MethodState:
    particles, outputs, counts = _ensemble_forward(state, system, jobs)
    new, x_bar = enkf_update(particles, outputs, system.x, system.sigma_nu, rng)
    return state.advanced(counts, ensemble=Ensemble(new), predicted=x_bar)


def eaki_step(state: MethodState, system: AugmentedSystem, jobs: int = 1) -> MethodState:
    particles, outputs, counts = _ensemble_forward(state, system, jobs)
    new, x_bar = eakf_update(particles, outputs, system.x, system.sigma_nu)
    return state.advanced(counts, ensemble=Ensemble(new), predicted=x_bar)


def etki_step(state: MethodState, system: AugmentedSystem, jobs: int = 1) -> MethodState:
    particles, outputs, counts = _ensemble_forward(state, system, jobs)
    new, x_bar = etkf_update(particles, outputs, system.x, system.sigma_nu)
    return state.advanced(counts, ensemble=Ensemble(new), predicted=x_bar)


# --------------------------------------------------------------------------
# driver
# --------------------------------------------------------------------------

@dataclass
class RunConfig:
    """Options for :func:`run`.

    ``initial`` overrides the prior as the starting distribution.
    ``to_reference`` maps the current moments into the space of
    ``reference`` (e.g. lifting low-rank coordinates) before errors are taken.
    """

    gamma: float = 1.0
    iterations: int = 30
    J: Optional[int] = None
    seed: int = 0
    exact_init: bool = False
    reference: Optional[GaussianBelief] = None
    jobs: int = 1
    initial: Optional[GaussianBelief] = None
    to_reference: Optional[Callable[[GaussianBelief], GaussianBelief]] = None
    divergence_factor: float = 1e8
    keep_particles: bool = False


def initial_state(method: str, problem: InverseProblem, config: RunConfig, rng: np.random.Generator) -> MethodState:
    start = config.initial if config.initial is not None else problem.prior
    if method in UKI_VARIANTS or method in ("iukf1", "iukf2"):
        return MethodState(belief=start)
    if config.J is None or config.J < 2:
        raise InvalidConfig(f"{method} needs an ensemble size J >= 2")
    particles = sample_gaussian(start, config.J, rng)
    ens = Ensemble(particles)
    if config.exact_init:
        from mfkinv.baselines import gaussian_init_correction

        ens = gaussian_init_correction(ens, start)
    return MethodState(ensemble=ens)


class _Whitener:
    def __init__(self, problem: InverseProblem):
        self.problem = problem
        self.L_eta = spd_sqrt(problem.noise_cov)
        self.L_0 = spd_sqrt(problem.prior_cov)

    def opt_error(self, predicted_g: Optional[np.ndarray], mean: np.ndarray) -> float:
        if predicted_g is None:
            return float("nan")
        r1 = sla.solve_triangular(self.L_eta, self.problem.y - predicted_g, lower=True)
        r2 = sla.solve_triangular(self.L_0, mean - self.problem.prior_mean, lower=True)
        return 0.5 * float(r1 @ r1) + 0.5 * float(r2 @ r2)


def iterate(
    state: MethodState,
    step: Callable[[MethodState], MethodState],
    problem: InverseProblem,
    config: RunConfig,
    n_steps: int,
) -> MethodState:
    """Apply ``step`` ``n_steps`` times, recording diagnostics after each step.

    Halts early (``state.diverged``) on non-finite values or when the mean norm
    exceeds ``divergence_factor`` times its initial norm (floored at 1).
    """
    whiten = _Whitener(problem)
    history = state.history
    limit = config.divergence_factor * max(np.linalg.norm(state.mean), 1.0)
    for _ in range(n_steps):
        t0 = time.perf_counter()
        try:
            new = step(state)
        except Divergence as exc:
            state.diverged = True
            state.message = str(exc)
            break
        wall_ms = 1e3 * (time.perf_counter() - t0)
        belief = new.moments()
        mean, cov = belief.mean, belief.covariance
        bad = not (np.all(np.isfinite(mean)) and np.all(np.isfinite(cov)))
        if not bad and np.linalg.norm(mean) > limit:
            bad = True
        mean_err = cov_err = float("nan")
        if config.reference is not None and not bad:
            shown = config.to_reference(belief) if config.to_reference else belief
            mean_err = relative_error(shown.mean, config.reference.mean)
            cov_err = relative_error(shown.covariance, config.reference.covariance)
        g_pred = None if new.predicted is None else new.predicted[: problem.n_y]
        rec = IterationRecord(
            iter=new.iteration,
            mean_rel_err=mean_err,
            cov_rel_err=cov_err,
            opt_err=float("nan") if bad else whiten.opt_error(g_pred, mean),
            fwd_evals=new.fwd_evals,
            wall_ms=wall_ms,
            mean=mean,
            covariance=cov,
            fwd_evals_hi=new.fwd_evals_hi,
            fwd_evals_lo=new.fwd_evals_lo,
            particles=None if not config.keep_particles or new.ensemble is None else new.ensemble.particles,
            diverged=bad,
        )
        history.append(rec)
        new.history = history
        state = new
        if bad:
            state.diverged = True
            state.message = "non-finite or exploding iterate"
            break
    return state


def run(method: str, problem: InverseProblem, config: Optional[RunConfig] = None):
    """Run a mean-field Kalman inversion from the prior (or ``config.initial``).

    Returns ``(final_state, history)``; ``history`` holds one
    :class:`IterationRecord` per completed step.
    """
    config = config or RunConfig()
    if method not in METHODS:
        raise InvalidConfig(f"unknown method {method!r}; expected one of {METHODS}")
    if config.iterations < 0:
        raise InvalidConfig("iterations must be >= 0")
    if method in ENSEMBLE_METHODS and problem.forward_lo is not None:
        raise InvalidConfig("bi-fidelity evaluation is only defined for UKI variants")
    rng = np.random.default_rng(config.seed)
    system = build_augmented(problem, config.gamma)
    state = initial_state(method, problem, config, rng)
    if method in UKI_VARIANTS:
        step = lambda s: uki_step(s, system, method, config.jobs)  # noqa: E731
    elif method == "eki":
        step = lambda s: eki_step(s, system, rng, config.jobs)  # noqa: E731
    elif method == "eaki":
        step = lambda s: eaki_step(s, system, config.jobs)  # noqa: E731
    else:
        step = lambda s: etki_step(s, system, config.jobs)  # noqa: E731
    state = iterate(state, step, problem, config, config.iterations)
    return state, state.history
