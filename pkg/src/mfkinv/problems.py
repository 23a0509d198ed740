"""Closed-form benchmark problems: linear 2-parameter, elliptic two-point BVP, Hilbert."""
from __future__ import annotations

import numpy as np
import scipy.linalg as sla

from mfkinv.core import InverseProblem

LINEAR_NOISE_STD = 0.1


def _linear_map(G):
    G = np.array(G, dtype=float)
    G.flags.writeable = False

    def forward(theta):
        return G @ theta

    return forward, G


def linear_problem(variant: str = "over") -> InverseProblem:
    """Two-parameter linear problem, over- or under-determined."""
    if variant == "over":
        G = [[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]
        y = [3.0, 7.0, 10.0]
    elif variant == "under":
        G = [[1.0, 2.0]]
        y = [3.0]
    else:
        raise ValueError(f"variant must be 'over' or 'under', got {variant!r}")
    forward, G = _linear_map(G)
    return InverseProblem(
        forward=forward,
        y=np.array(y),
        noise_cov=LINEAR_NOISE_STD**2 * np.eye(len(y)),
        prior_mean=np.zeros(2),
        prior_cov=np.eye(2),
        name=f"linear-{variant}",
        metadata={"G": G},
    )


def elliptic_pressure(x, theta) -> np.ndarray:
    """Solution of -(exp(theta1) p')' = 1 on [0, 1] with p(0) = 0, p(1) = theta2."""
    x = np.asarray(x, dtype=float)
    return theta[1] * x + np.exp(-theta[0]) * (-0.5 * x**2 + 0.5 * x)


def elliptic_problem(variant: str = "well") -> InverseProblem:
    if variant == "well":
        xs, y = np.array([0.25, 0.75]), np.array([27.5, 79.7])
    elif variant == "under":
        xs, y = np.array([0.25]), np.array([27.5])
    else:
        raise ValueError(f"variant must be 'well' or 'under', got {variant!r}")

    def forward(theta):
        return elliptic_pressure(xs, theta)

    return InverseProblem(
        forward=forward,
        y=y,
        noise_cov=LINEAR_NOISE_STD**2 * np.eye(y.size),
        prior_mean=np.array([0.0, 100.0]),
        prior_cov=np.eye(2),
        name=f"elliptic-{variant}",
        metadata={"x_obs": xs},
    )


def hilbert_problem(n: int = 100) -> InverseProblem:
    """Hilbert-matrix forward map with noise-free datum ``y = G 1``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    forward, G = _linear_map(sla.hilbert(n))
    return InverseProblem(
        forward=forward,
        y=G @ np.ones(n),
        noise_cov=LINEAR_NOISE_STD**2 * np.eye(n),
        prior_mean=np.zeros(n),
        prior_cov=np.eye(n),
        name=f"hilbert-{n}",
        metadata={"G": G},
    )
