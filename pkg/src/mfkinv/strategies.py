"""Problem wrappers: low-rank prior reparameterization, box constraints, bi-fidelity."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from scipy.special import expit

from mfkinv.core import GaussianBelief, InverseProblem, symmetrize
from mfkinv.errors import InvalidConfig, RankExceeded, ShapeMismatch

LOWRANK_CUTOFF = 1e-12


@dataclass(frozen=True, eq=False)
class LowRankMap:
    """``theta = anchor + basis @ tau`` with ``tau ~ N(0, diag(singular_values))``."""

    basis: np.ndarray
    singular_values: np.ndarray
    anchor: np.ndarray

    @property
    def rank(self) -> int:
        return self.singular_values.size

    def lift(self, tau: np.ndarray) -> np.ndarray:
        return self.anchor + self.basis @ np.asarray(tau, dtype=float)

    def restrict(self, theta: np.ndarray) -> np.ndarray:
        return self.basis.T @ (np.asarray(theta, dtype=float) - self.anchor)

    def lift_belief(self, belief: GaussianBelief) -> GaussianBelief:
        U = self.basis
        return GaussianBelief(self.lift(belief.mean), symmetrize(U @ belief.covariance @ U.T))


def lowrank_wrap(problem: InverseProblem, n_r: Optional[int] = None) -> InverseProblem:
    """Reparameterize over the ``n_r`` dominant prior directions.

    Without ``n_r`` every mode with eigenvalue >= 1e-12 times the largest is
    kept. The returned problem carries its :class:`LowRankMap` in
    ``metadata["lowrank"]``.
    """
    lam, vecs = np.linalg.eigh(problem.prior_cov)
    order = np.argsort(lam)[::-1]
    lam, vecs = lam[order], vecs[:, order]
    rank = int(np.sum(lam >= LOWRANK_CUTOFF * lam[0]))
    if n_r is None:
        n_r = rank
    if not 1 <= n_r <= rank:
        raise RankExceeded(f"n_r={n_r} outside [1, {rank}] (numerical rank of the prior)")
    lr = LowRankMap(basis=vecs[:, :n_r], singular_values=lam[:n_r], anchor=problem.prior_mean.copy())
    inner = problem.forward

    def forward(tau):
        return inner(lr.lift(tau))

    lo = problem.forward_lo
    return replace(
        problem,
        forward=forward,
        forward_lo=None if lo is None else (lambda tau: lo(lr.lift(tau))),
        prior_mean=np.zeros(n_r),
        prior_cov=np.diag(lr.singular_values),
        name=problem.name,
        metadata={**problem.metadata, "lowrank": lr},
    )


@dataclass(frozen=True, eq=False)
class BoxTransform:
    """Element-wise map from unconstrained ``theta_tilde`` to the constraint set.

    ``positive``: ``exp(t)``. ``interval``: ``lower + (upper - lower) / (1 + exp(t))``,
    so ``t -> +inf`` approaches ``lower``. ``mask`` restricts the map to some
    coordinates; the rest pass through. Outputs are nudged one ulp inside
    the bounds so saturation never reaches them in floating point.
    """

    kind: str
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in ("positive", "interval"):
            raise InvalidConfig(f"unknown box kind {self.kind!r}")
        if self.kind == "interval":
            if self.lower is None or self.upper is None:
                raise InvalidConfig("interval transform needs lower and upper bounds")
            lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
            hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
            if np.any(lo >= hi):
                raise InvalidConfig("interval bounds need lower < upper")
            object.__setattr__(self, "lower", lo)
            object.__setattr__(self, "upper", hi)
        if self.mask is not None:
            object.__setattr__(self, "mask", np.asarray(self.mask, dtype=bool))

    def _sel(self, n: int) -> np.ndarray:
        return np.ones(n, dtype=bool) if self.mask is None else self.mask

    def _bounds(self, n):
        if self.kind == "positive":
            return np.zeros(n), np.full(n, np.inf)
        return np.broadcast_to(self.lower, n), np.broadcast_to(self.upper, n)

    def forward(self, t: np.ndarray) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        out = t.copy()
        sel = self._sel(t.size)
        lo, hi = self._bounds(t.size)
        lo, hi = lo[sel], hi[sel]
        if self.kind == "positive":
            with np.errstate(over="ignore"):
                val = np.exp(t[sel])
        else:
            val = lo + (hi - lo) * expit(-t[sel])
        out[sel] = np.clip(val, np.nextafter(lo, np.inf), np.nextafter(hi, -np.inf))
        return out

    def inverse(self, theta: np.ndarray) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        out = theta.copy()
        sel = self._sel(theta.size)
        lo, hi = self._bounds(theta.size)
        v = theta[sel]
        if np.any(v <= lo[sel]) or np.any(v >= hi[sel]):
            raise InvalidConfig("value outside the open constraint set")
        if self.kind == "positive":
            out[sel] = np.log(v)
        else:
            out[sel] = np.log((hi[sel] - v) / (v - lo[sel]))
        return out

    def jacobian_diag(self, t: np.ndarray) -> np.ndarray:
        """d theta / d theta_tilde, element-wise."""
        t = np.asarray(t, dtype=float)
        jac = np.ones_like(t)
        sel = self._sel(t.size)
        if self.kind == "positive":
            jac[sel] = np.exp(t[sel])
        else:
            lo, hi = self._bounds(t.size)
            s = expit(-t[sel])
            jac[sel] = -(hi[sel] - lo[sel]) * s * (1 - s)
        return jac

    def contains(self, theta: np.ndarray) -> bool:
        """True when every constrained entry lies strictly inside its bounds."""
        theta = np.asarray(theta, dtype=float)
        sel = self._sel(theta.size)
        lo, hi = self._bounds(theta.size)
        v = theta[sel]
        return bool(np.all(v > lo[sel]) and np.all(v < hi[sel]))


def box_wrap(
    problem: InverseProblem,
    transform: BoxTransform,
    prior_mean: Optional[np.ndarray] = None,
    prior_cov: Optional[np.ndarray] = None,
) -> InverseProblem:
    """Compose the forward map with ``transform`` so inversion runs on ``theta_tilde``.

    The default prior in ``theta_tilde`` space maps the original prior mean
    through the inverse transform and linearizes the covariance around it.
    The transform is stored in ``metadata["box"]``.
    """
    if prior_mean is None:
        prior_mean = transform.inverse(problem.prior_mean)
    if prior_cov is None:
        jinv = 1.0 / transform.jacobian_diag(prior_mean)
        prior_cov = jinv[:, None] * problem.prior_cov * jinv[None, :]
    inner = problem.forward

    def forward(t):
        return inner(transform.forward(t))

    lo = problem.forward_lo
    return replace(
        problem,
        forward=forward,
        forward_lo=None if lo is None else (lambda t: lo(transform.forward(t))),
        prior_mean=prior_mean,
        prior_cov=prior_cov,
        metadata={**problem.metadata, "box": transform},
    )


BIFIDELITY_CENTERS = {"high": "node", "low": "outer"}


def bifidelity_wrap(
    problem_hi: InverseProblem, problem_lo: InverseProblem, center: str = "high"
) -> InverseProblem:
    """High-fidelity problem whose UKI sigma points 1..J-1 use ``problem_lo``'s map.

    ``center`` picks the reference for the low-fidelity output deviations.
    ``"high"`` uses the high-fidelity center output, so identical fidelities
    reproduce the plain run exactly. ``"low"`` uses the mean of the
    low-fidelity outputs, which removes a systematic offset between the two
    models from the output covariances at no extra evaluation cost.
    """
    if center not in BIFIDELITY_CENTERS:
        raise InvalidConfig(f"center must be 'high' or 'low', got {center!r}")
    if problem_hi.n_y != problem_lo.n_y or problem_hi.n_theta != problem_lo.n_theta:
        raise ShapeMismatch(
            f"fidelities disagree: (N_theta, N_y) = {(problem_hi.n_theta, problem_hi.n_y)} "
            f"vs {(problem_lo.n_theta, problem_lo.n_y)}"
        )
    return replace(
        problem_hi,
        forward_lo=problem_lo.forward,
        metadata={
            **problem_hi.metadata,
            "bifidelity": True,
            "bifidelity_center": BIFIDELITY_CENTERS[center],
        },
    )
