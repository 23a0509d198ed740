"""Reference posterior samplers: random-walk Metropolis and preconditioned Crank-Nicolson.

Both accumulate post-burn-in moments online, so long chains are never stored.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg as sla

from mfkinv.core import GaussianBelief, InverseProblem, spd_sqrt
from mfkinv.errors import InvalidConfig, InvalidStep, KalmanInversionError

BLOCK = 8192
N_BATCHES = 32


@dataclass
class ChainConfig:
    """``n_samples`` counts every chain step, burn-in included."""

    n_samples: int
    burn_in: int = 0
    step_size: float = 1.0
    seed: int = 0
    start: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.n_samples < 1:
            raise InvalidConfig("n_samples must be positive")
        if not 0 <= self.burn_in < self.n_samples:
            raise InvalidConfig("burn_in must satisfy 0 <= burn_in < n_samples")
        if not self.step_size > 0:
            raise InvalidConfig("step_size must be positive")


@dataclass
class ChainResult:
    mean: np.ndarray
    covariance: np.ndarray
    acceptance_rate: float
    n_kept: int
    method: str
    mcse: Optional[np.ndarray] = None

    def belief(self) -> GaussianBelief:
        return GaussianBelief(self.mean, self.covariance)

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(np.diag(self.covariance))


class RunningMoments:
    """Welford accumulator for a vector-valued stream."""

    def __init__(self, dim: int):
        self.n = 0
        self.mean = np.zeros(dim)
        self._m2 = np.zeros((dim, dim))

    def push(self, x: np.ndarray) -> None:
        self.n += 1
        delta = x - self.mean
        self.mean += delta / self.n
        self._m2 += np.outer(delta, x - self.mean)

    @property
    def covariance(self) -> np.ndarray:
        if self.n < 2:
            return np.full_like(self._m2, np.nan)
        c = self._m2 / (self.n - 1)
        return 0.5 * (c + c.T)


class _Potential:
    """Data misfit and its prior-regularized version, with rejection on failure."""

    def __init__(self, problem: InverseProblem):
        self.problem = problem
        self.w_eta = sla.solve_triangular(spd_sqrt(problem.noise_cov), np.eye(problem.n_y), lower=True)
        self.w_0 = sla.solve_triangular(spd_sqrt(problem.prior_cov), np.eye(problem.n_theta), lower=True)

    def misfit(self, theta: np.ndarray) -> float:
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                r = self.w_eta @ (self.problem.y - self.problem(theta))
        except (KalmanInversionError, np.linalg.LinAlgError, FloatingPointError):
            return np.inf
        val = 0.5 * float(r @ r)
        return val if np.isfinite(val) else np.inf

    def regularized(self, theta: np.ndarray) -> float:
        r = self.w_0 @ (theta - self.problem.prior_mean)
        return self.misfit(theta) + 0.5 * float(r @ r)


def _chain(problem, config: ChainConfig, propose, potential, method: str) -> ChainResult:
    rng = np.random.default_rng(config.seed)
    n = problem.n_theta
    theta = np.array(config.start if config.start is not None else problem.prior_mean, dtype=float)
    phi = potential(theta)
    acc = RunningMoments(n)
    n_keep = config.n_samples - config.burn_in
    batch = n_keep // N_BATCHES
    batch_sums = np.zeros((N_BATCHES, n))
    accepted = 0
    done = 0
    while done < config.n_samples:
        m = min(BLOCK, config.n_samples - done)
        xi = rng.standard_normal((m, n))
        log_u = np.log(rng.random(m))
        for k in range(m):
            cand = propose(theta, xi[k])
            phi_c = potential(cand)
            if log_u[k] < phi - phi_c:
                theta, phi = cand, phi_c
                accepted += 1
            kept = done + k - config.burn_in
            if kept >= 0:
                acc.push(theta)
                if batch and kept < batch * N_BATCHES:
                    batch_sums[kept // batch] += theta
        done += m
    mcse = None
    if batch:
        # batch-means standard error of the chain mean
        means = batch_sums / batch
        mcse = means.std(axis=0, ddof=1) / np.sqrt(N_BATCHES)
    return ChainResult(
        mean=acc.mean.copy(),
        covariance=acc.covariance,
        acceptance_rate=accepted / config.n_samples,
        n_kept=acc.n,
        method=method,
        mcse=mcse,
    )


def rwm_sample(problem: InverseProblem, config: ChainConfig) -> ChainResult:
    """Random-walk Metropolis with isotropic proposal ``theta + step * xi``."""
    pot = _Potential(problem)
    step = config.step_size
    return _chain(problem, config, lambda th, xi: th + step * xi, pot.regularized, "rwm")


def pcn_sample(problem: InverseProblem, config: ChainConfig) -> ChainResult:
    """Preconditioned Crank-Nicolson; the prior-reversible proposal leaves only the misfit in the ratio."""
    beta = config.step_size
    if not 0 < beta < 1:
        raise InvalidStep(f"pCN step must lie in (0, 1), got {beta}")
    pot = _Potential(problem)
    r0 = problem.prior_mean
    L0 = spd_sqrt(problem.prior_cov)
    rho = np.sqrt(1.0 - beta**2)
    return _chain(problem, config, lambda th, xi: r0 + rho * (th - r0) + beta * (L0 @ xi), pot.misfit, "pcn")
