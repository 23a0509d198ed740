"""Iterative (transport/coupling) Kalman filters and exact ensemble initialization.

These deform the prior into the posterior over ``N = 1/dt`` analysis steps on
the original observation ``y`` with inflated noise ``Sigma_eta / dt`` and no
prediction inflation. They share the analysis kernels of
:mod:`mfkinv.methods`, so the only differences from the mean-field methods are
the observation, the noise scaling and the missing inflation.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from mfkinv.core import Ensemble, GaussianBelief, InverseProblem
from mfkinv.errors import InvalidConfig, RankDeficient
from mfkinv.meanfield import evaluate_columns
from mfkinv.methods import (
    MethodState,
    RunConfig,
    eakf_update,
    enkf_update,
    etkf_update,
    initial_state,
    iterate,
    sigma_points,
    ukf_update,
)

TRANSPORT_VARIANTS = ("iukf1", "iukf2", "ienkf", "ieakf", "ietkf")


@dataclass
class TransportConfig:
    dt: float = 1.0 / 30.0
    variant: str = "iukf2"
    J: Optional[int] = None
    exact_init: bool = True
    jobs: int = 1

    @property
    def n_steps(self) -> int:
        """Number of steps N with N * dt == 1; rejects dt that is not 1/N."""
        if not 0 < self.dt <= 1:
            raise InvalidConfig(f"dt must lie in (0, 1], got {self.dt}")
        n = int(round(1.0 / self.dt))
        if abs(n * self.dt - 1.0) > 1e-4:
            raise InvalidConfig(f"dt={self.dt} is not the reciprocal of an integer")
        return n


def transport_step(
    state: MethodState,
    problem: InverseProblem,
    dt: float,
    variant: str,
    rng: Optional[np.random.Generator] = None,
    jobs: int = 1,
) -> MethodState:
    """One analysis step on ``y`` with noise ``Sigma_eta / dt``; no inflation."""
    if not 0 < dt <= 1:
        raise InvalidConfig(f"dt must lie in (0, 1], got {dt}")
    noise = problem.noise_cov / dt
    if variant in ("iukf1", "iukf2"):
        sp = sigma_points(state.belief.mean, state.belief.covariance, variant)
        outputs = evaluate_columns(problem.forward, sp.points, jobs)
        mean, cov, y_hat = ukf_update(sp, outputs, problem.y, noise)
        return state.advanced((sp.J, 0), belief=GaussianBelief(mean, cov), predicted=y_hat)
    if variant not in ("ienkf", "ieakf", "ietkf"):
        raise InvalidConfig(f"unknown transport variant {variant!r}")
    particles = state.ensemble.particles
    outputs = evaluate_columns(problem.forward, particles, jobs)
    if variant == "ienkf":
        if rng is None:
            raise InvalidConfig("ienkf needs a random generator")
        new, y_bar = enkf_update(particles, outputs, problem.y, noise, rng)
    elif variant == "ieakf":
        new, y_bar = eakf_update(particles, outputs, problem.y, noise)
    else:
        new, y_bar = etkf_update(particles, outputs, problem.y, noise)
    return state.advanced((particles.shape[1], 0), ensemble=Ensemble(new), predicted=y_bar)


def gaussian_init_correction(samples: Ensemble, target: GaussianBelief) -> Ensemble:
    """Linearly recombine samples so their empirical moments equal ``target`` exactly.

    With centered samples ``Theta' = U1 S1 V1^T`` (rows are particles) and
    ``(J-1) C = U2 S2 U2^T``, the corrected deviations are
    ``Theta' V1 S1^{-1} S2^{1/2} U2^T``; column sums stay zero, so the shifted
    mean is exact.
    """
    J, n = samples.J, samples.dim
    if J < n + 1:
        raise RankDeficient(f"exact initialization needs J >= n_theta + 1 = {n + 1}, got {J}")
    theta = samples.particles.T
    dev = theta - theta.mean(axis=0)
    U1, S1, V1t = np.linalg.svd(dev, full_matrices=False)
    if S1[-1] <= 1e-12 * S1[0]:
        raise RankDeficient("centered samples do not span the parameter space")
    S2, U2 = np.linalg.eigh((J - 1) * np.asarray(target.covariance))
    S2 = np.clip(S2, 0.0, None)
    X = (V1t.T / S1) @ (U2 * np.sqrt(S2)).T
    corrected = dev @ X + target.mean[None, :]
    return Ensemble(corrected.T)


def run_transport(
    variant: str,
    problem: InverseProblem,
    config: Optional[TransportConfig] = None,
    seed: int = 0,
    reference: Optional[GaussianBelief] = None,
    initial: Optional[GaussianBelief] = None,
):
    """Run ``N = 1/dt`` transport steps from the prior (or ``initial``).

    Returns ``(final_state, history)`` with the same record schema as
    :func:`mfkinv.methods.run`.
    """
    config = config or TransportConfig(variant=variant)
    if variant not in TRANSPORT_VARIANTS:
        raise InvalidConfig(f"unknown transport variant {variant!r}")
    if problem.forward_lo is not None:
        raise InvalidConfig("bi-fidelity evaluation is only defined for UKI variants")
    n_steps = config.n_steps
    rng = np.random.default_rng(seed)
    run_cfg = RunConfig(
        iterations=n_steps,
        J=config.J,
        seed=seed,
        exact_init=config.exact_init,
        reference=reference,
        jobs=config.jobs,
        initial=initial,
    )
    state = initial_state(variant, problem, run_cfg, rng)
    dt = 1.0 / n_steps

    def step(s):
        return transport_step(s, problem, dt, variant, rng, config.jobs)

    state = iterate(state, step, problem, run_cfg, n_steps)
    return state, state.history
