"""Augmented mean-field system shared by all Kalman inversion methods.

The artificial dynamics inflate the covariance by ``gamma + 1`` in the
prediction step and observe ``F(theta) = [G(theta); theta]`` against the
fixed datum ``x = [y; r0]`` with noise ``(gamma + 1)/gamma * blockdiag(Sigma_eta, Sigma_0)``.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import scipy.linalg as sla

from mfkinv.core import Ensemble, GaussianBelief, InverseProblem
from mfkinv.errors import Divergence, InvalidGamma

DEFAULT_GAMMA = 1.0


def evaluate_columns(
    fns: Callable[[np.ndarray], np.ndarray] | Sequence[Callable[[np.ndarray], np.ndarray]],
    thetas: np.ndarray,
    jobs: int = 1,
) -> np.ndarray:
    """Apply a map to each column of ``thetas``; returns outputs column-wise.

    ``fns`` may be a single callable or one callable per column. With
    ``jobs > 1`` columns are dispatched to a thread pool; results are always
    gathered in column order.
    """
    J = thetas.shape[1]
    if callable(fns):
        fns = [fns] * J
    if len(fns) != J:
        raise ValueError(f"got {len(fns)} maps for {J} columns")
    cols = [np.ascontiguousarray(thetas[:, j]) for j in range(J)]
    if jobs > 1 and J > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outs = list(pool.map(lambda fc: fc[0](fc[1]), zip(fns, cols)))
    else:
        outs = [f(c) for f, c in zip(fns, cols)]
    out = np.column_stack([np.asarray(o, dtype=float).reshape(-1) for o in outs])
    if not np.all(np.isfinite(out)):
        raise Divergence("forward map returned non-finite values")
    return out


@dataclass(frozen=True, eq=False)
class AugmentedSystem:
    """Extended observation model for one inverse problem and one gamma."""

    problem: InverseProblem
    gamma: float
    x: np.ndarray
    sigma_nu: np.ndarray

    @property
    def n_x(self) -> int:
        return self.x.size

    def augmented_map(self, theta: np.ndarray) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        return np.concatenate([self.problem(theta), theta])

    def evaluate(self, thetas: np.ndarray, jobs: int = 1, bifidelity: bool = False):
        """Evaluate ``F`` at every column.

        Returns the ``(n_x, J)`` outputs and a ``(hi, lo)`` evaluation count.
        When ``bifidelity`` is set and the problem carries a low-fidelity map,
        column 0 uses the full model and the remaining columns the cheap one.
        """
        J = thetas.shape[1]
        lo = self.problem.forward_lo
        if bifidelity and lo is not None:
            fns = [self.problem.forward] + [lo] * (J - 1)
            counts = (1, J - 1)
        else:
            fns = self.problem.forward
            counts = (J, 0)
        g = evaluate_columns(fns, thetas, jobs)
        return np.vstack([g, thetas]), counts


def build_augmented(problem: InverseProblem, gamma: float = DEFAULT_GAMMA) -> AugmentedSystem:
    if not gamma > 0:
        raise InvalidGamma(f"gamma must be > 0, got {gamma}")
    scale = (gamma + 1.0) / gamma
    sigma_nu = scale * sla.block_diag(problem.noise_cov, problem.prior_cov)
    x = np.concatenate([problem.y, problem.prior_mean])
    return AugmentedSystem(problem=problem, gamma=float(gamma), x=x, sigma_nu=sigma_nu)


def inflate(belief: GaussianBelief, gamma: float) -> GaussianBelief:
    """Prediction step: keep the mean, scale the covariance by ``gamma + 1``."""
    return GaussianBelief(belief.mean, (gamma + 1.0) * belief.covariance)


def inflate_ensemble(E: Ensemble, gamma: float) -> Ensemble:
    """Deterministic spread inflation about the ensemble mean (no noise draw)."""
    m = E.mean
    return Ensemble(m[:, None] + np.sqrt(gamma + 1.0) * (E.particles - m[:, None]))
