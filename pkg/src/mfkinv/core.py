"""Gaussian beliefs, ensembles, inverse problems and SPD helpers."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg as sla

from mfkinv.errors import DegenerateEnsemble, NotSPD, SingularPrecision

ForwardMap = Callable[[np.ndarray], np.ndarray]

JITTER_SCALE = 1e-12
PRECISION_COND_LIMIT = 1e14


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class GaussianBelief:
    """Mean vector and covariance matrix of a Gaussian approximation."""

    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        mean = _frozen(np.atleast_1d(self.mean))
        cov = _frozen(np.atleast_2d(self.covariance))
        if cov.shape != (mean.size, mean.size):
            raise ValueError(
                f"covariance shape {cov.shape} does not match mean length {mean.size}"
            )
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)

    @property
    def dim(self) -> int:
        return self.mean.size


@dataclass(frozen=True, eq=False)
class Ensemble:
    """Particles stored column-wise, shape ``(n_theta, J)``."""

    particles: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.particles, dtype=float)
        if p.ndim == 1:
            p = p[None, :]
        if p.shape[1] < 2:
            raise DegenerateEnsemble(f"ensemble needs J >= 2 particles, got {p.shape[1]}")
        object.__setattr__(self, "particles", _frozen(p))

    @property
    def J(self) -> int:
        return self.particles.shape[1]

    @property
    def dim(self) -> int:
        return self.particles.shape[0]

    @property
    def mean(self) -> np.ndarray:
        return self.particles.mean(axis=1)

    @property
    def sqrt_factor(self) -> np.ndarray:
        """Z with columns (theta_j - mean)/sqrt(J-1), so Z Z^T is the sample covariance."""
        return (self.particles - self.mean[:, None]) / np.sqrt(self.J - 1)

    @property
    def covariance(self) -> np.ndarray:
        Z = self.sqrt_factor
        return Z @ Z.T

    def belief(self) -> GaussianBelief:
        mean, cov = ensemble_moments(self)
        return GaussianBelief(mean, cov)


@dataclass(frozen=True, eq=False)
class InverseProblem:
    """Recover theta from ``y = forward(theta) + eta`` with a Gaussian prior.

    ``forward_lo`` is an optional cheaper model of the same map; UKI routes
    every non-center sigma point to it (see :func:`mfkinv.strategies.bifidelity_wrap`).
    """

    forward: ForwardMap
    y: np.ndarray
    noise_cov: np.ndarray
    prior_mean: np.ndarray
    prior_cov: np.ndarray
    name: str = "problem"
    forward_lo: Optional[ForwardMap] = None
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        y = _frozen(np.atleast_1d(self.y))
        noise = _frozen(np.atleast_2d(self.noise_cov))
        r0 = _frozen(np.atleast_1d(self.prior_mean))
        s0 = _frozen(np.atleast_2d(self.prior_cov))
        if noise.shape != (y.size, y.size):
            raise ValueError(f"noise_cov shape {noise.shape} does not match y length {y.size}")
        if s0.shape != (r0.size, r0.size):
            raise ValueError(f"prior_cov shape {s0.shape} does not match prior_mean length {r0.size}")
        for label, mat in (("noise_cov", noise), ("prior_cov", s0)):
            try:
                np.linalg.cholesky(mat)
            except np.linalg.LinAlgError as exc:
                raise NotSPD(f"{label} is not SPD") from exc
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "noise_cov", noise)
        object.__setattr__(self, "prior_mean", r0)
        object.__setattr__(self, "prior_cov", s0)

    @property
    def n_theta(self) -> int:
        return self.prior_mean.size

    @property
    def n_y(self) -> int:
        return self.y.size

    @property
    def prior(self) -> GaussianBelief:
        return GaussianBelief(self.prior_mean, self.prior_cov)

    def __call__(self, theta: np.ndarray) -> np.ndarray:
        return np.asarray(self.forward(np.asarray(theta, dtype=float)), dtype=float).reshape(-1)

    def misfit(self, theta: np.ndarray) -> float:
        """Data misfit 0.5 |Sigma_eta^{-1/2}(y - G(theta))|^2."""
        L = spd_sqrt(self.noise_cov)
        r = sla.solve_triangular(L, self.y - self(theta), lower=True)
        return 0.5 * float(r @ r)

    def regularized_misfit(self, theta: np.ndarray) -> float:
        L0 = spd_sqrt(self.prior_cov)
        r = sla.solve_triangular(L0, np.asarray(theta) - self.prior_mean, lower=True)
        return self.misfit(theta) + 0.5 * float(r @ r)


def symmetrize(C: np.ndarray) -> np.ndarray:
    return 0.5 * (C + C.T)


def spd_sqrt(C: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor L with ``L @ L.T == C``.

    A single diagonal jitter of ``1e-12 * trace(C) / n`` is tried if the plain
    factorization fails (round-off loss of definiteness).

    Raises
    ------
    NotSPD
        If the jittered matrix still cannot be factorized.
    """
    C = np.atleast_2d(np.asarray(C, dtype=float))
    if not np.all(np.isfinite(C)):
        raise NotSPD("matrix has non-finite entries")
    try:
        return np.linalg.cholesky(C)
    except np.linalg.LinAlgError:
        pass
    n = C.shape[0]
    jitter = JITTER_SCALE * np.trace(C) / n
    if not jitter > 0:
        raise NotSPD("matrix has non-positive trace")
    try:
        return np.linalg.cholesky(C + jitter * np.eye(n))
    except np.linalg.LinAlgError as exc:
        raise NotSPD("matrix is not positive definite even after jitter") from exc


def ensemble_moments(E: Ensemble | np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sample mean and 1/(J-1)-normalized covariance of the ensemble."""
    particles = E.particles if isinstance(E, Ensemble) else np.atleast_2d(np.asarray(E, dtype=float))
    J = particles.shape[1]
    if J < 2:
        raise DegenerateEnsemble(f"ensemble needs J >= 2 particles, got {J}")
    mean = particles.mean(axis=1)
    dev = particles - mean[:, None]
    return mean, dev @ dev.T / (J - 1)


def gaussian_posterior_linear(G: np.ndarray, problem: InverseProblem) -> GaussianBelief:
    """Closed-form posterior for ``y = G theta + eta`` with Gaussian prior."""
    G = np.atleast_2d(np.asarray(G, dtype=float))
    if G.shape != (problem.n_y, problem.n_theta):
        raise ValueError(f"G has shape {G.shape}, expected {(problem.n_y, problem.n_theta)}")
    noise_inv_G = sla.cho_solve(sla.cho_factor(problem.noise_cov, lower=True), G)
    prior_prec = sla.cho_solve(
        sla.cho_factor(problem.prior_cov, lower=True), np.eye(problem.n_theta)
    )
    precision = symmetrize(G.T @ noise_inv_G + prior_prec)
    if np.linalg.cond(precision) > PRECISION_COND_LIMIT:
        raise SingularPrecision("posterior precision is numerically singular")
    cov = symmetrize(sla.cho_solve(sla.cho_factor(precision, lower=True), np.eye(problem.n_theta)))
    mean = problem.prior_mean + cov @ (noise_inv_G.T @ (problem.y - G @ problem.prior_mean))
    return GaussianBelief(mean, cov)


def relative_error(value: np.ndarray, reference: np.ndarray) -> float:
    """Relative 2-/Frobenius-norm error; absolute if the reference is zero."""
    denom = np.linalg.norm(reference)
    diff = np.linalg.norm(np.asarray(value) - np.asarray(reference))
    return float(diff / denom) if denom > 0 else float(diff)


def sample_gaussian(belief: GaussianBelief, J: int, rng: np.random.Generator) -> np.ndarray:
    """J i.i.d. draws as columns of an ``(n, J)`` array."""
    L = spd_sqrt(belief.covariance)
    return belief.mean[:, None] + L @ rng.standard_normal((belief.dim, J))
