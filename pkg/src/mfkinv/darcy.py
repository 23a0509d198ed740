"""2-D Darcy flow forward model with a Karhunen-Loeve log-permeability field.

Pressure solves ``-div(a grad p) = f`` on the unit square with ``p = 0`` on
the boundary. The discretization is cell-centered: ``grid_n`` cells per side,
5-point stencil solved by banded Cholesky, harmonic averaging of ``a`` across interior faces and a
half-cell distance to the wall on boundary faces. Pressure is sampled at the
7x7 interior lattice ``(i/8, j/8)`` by bilinear interpolation between cell
centers.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from mfkinv.core import InverseProblem
from mfkinv.errors import SolverFailure

TAU = 3.0
REGULARITY = 2.0
N_OBS_SIDE = 7


def source_term(x2: np.ndarray) -> np.ndarray:
    """Piecewise-constant source in the vertical coordinate."""
    x2 = np.asarray(x2, dtype=float)
    return np.where(x2 <= 4.0 / 6.0, 1000.0, np.where(x2 <= 5.0 / 6.0, 2000.0, 3000.0))


def cell_centers(grid_n: int) -> np.ndarray:
    return (np.arange(grid_n) + 0.5) / grid_n


def measurement_points() -> np.ndarray:
    """The 49 points (i/8, j/8), i, j = 1..7, x1-major order; shape ``(49, 2)``."""
    ticks = np.arange(1, N_OBS_SIDE + 1) / (N_OBS_SIDE + 1)
    g1, g2 = np.meshgrid(ticks, ticks, indexing="ij")
    return np.column_stack([g1.ravel(), g2.ravel()])


def kl_wavenumbers(n_modes: int, tau: float = TAU, d: float = REGULARITY):
    """Leading ``n_modes`` lattice indices and eigenvalues, largest first.

    Ties in eigenvalue are broken by lexicographic ``(l1, l2)``.
    """
    # the n_modes smallest |l| lie inside a quarter disk of radius sqrt(4 n / pi)
    kmax = int(np.ceil(np.sqrt(4.0 * n_modes / np.pi))) + 2
    ls = [(l1, l2) for l1 in range(kmax + 1) for l2 in range(kmax + 1) if (l1, l2) != (0, 0)]
    lam = {l: (np.pi**2 * (l[0] ** 2 + l[1] ** 2) + tau**2) ** (-d) for l in ls}
    ordered = sorted(ls, key=lambda l: (-lam[l], l[0], l[1]))[:n_modes]
    return np.array(ordered, dtype=int), np.array([lam[l] for l in ordered])


def kl_basis(l: tuple[int, int], x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    l1, l2 = l
    if l2 == 0:
        return np.sqrt(2.0) * np.cos(np.pi * l1 * x1)
    if l1 == 0:
        return np.sqrt(2.0) * np.cos(np.pi * l2 * x2)
    return 2.0 * np.cos(np.pi * l1 * x1) * np.cos(np.pi * l2 * x2)


@dataclass(frozen=True, eq=False)
class KLField:
    """Truncated KL expansion evaluated at cell centers.

    ``basis`` has shape ``(n_modes, grid_n * grid_n)``, flattened x1-major.
    """

    tau: float
    d: float
    n_modes: int
    grid_n: int
    wavenumbers: np.ndarray
    eigenvalues: np.ndarray
    basis: np.ndarray

    @property
    def scaled_basis(self) -> np.ndarray:
        return np.sqrt(self.eigenvalues)[:, None] * self.basis


@lru_cache(maxsize=32)
def kl_field(grid_n: int, n_modes: int, tau: float = TAU, d: float = REGULARITY) -> KLField:
    ls, lam = kl_wavenumbers(n_modes, tau, d)
    c = cell_centers(grid_n)
    x1, x2 = np.meshgrid(c, c, indexing="ij")
    basis = np.stack([kl_basis(tuple(l), x1, x2).ravel() for l in ls])
    for arr in (ls, lam, basis):
        arr.flags.writeable = False
    return KLField(tau, d, n_modes, grid_n, ls, lam, basis)


def kl_field_eval(field: KLField, theta: np.ndarray) -> np.ndarray:
    """Log-permeability on the ``(grid_n, grid_n)`` cell grid."""
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    if theta.size > field.n_modes:
        raise ValueError(f"{theta.size} coefficients for a {field.n_modes}-mode field")
    k = theta.size
    vals = theta @ field.scaled_basis[:k]
    return vals.reshape(field.grid_n, field.grid_n)


@lru_cache(maxsize=32)
def _stencil(grid_n: int):
    idx = np.arange(grid_n * grid_n).reshape(grid_n, grid_n)
    rows_x, cols_x = idx[:-1, :].ravel(), idx[1:, :].ravel()
    rows_y, cols_y = idx[:, :-1].ravel(), idx[:, 1:].ravel()
    return rows_x, cols_x, rows_y, cols_y


@lru_cache(maxsize=32)
def observation_operator(grid_n: int) -> sp.csr_matrix:
    """Sparse bilinear interpolation from cell centers to the 49 measurement points."""
    pts = measurement_points()
    s = pts * grid_n - 0.5
    k = np.floor(s).astype(int)
    w = s - k
    if np.any(k < 0) or np.any(k + 1 >= grid_n):
        raise ValueError(f"grid_n={grid_n} too coarse for the measurement lattice")
    rows, cols, vals = [], [], []
    for r, ((k1, k2), (w1, w2)) in enumerate(zip(k, w)):
        for di, wi in ((0, 1 - w1), (1, w1)):
            for dj, wj in ((0, 1 - w2), (1, w2)):
                rows.append(r)
                cols.append((k1 + di) * grid_n + (k2 + dj))
                vals.append(wi * wj)
    return sp.csr_matrix((vals, (rows, cols)), shape=(len(pts), grid_n * grid_n))


def _coefficients(perm: np.ndarray):
    """Cell diagonal and face transmissibilities (x1 faces, x2 faces)."""
    n = perm.shape[0]
    h2 = 1.0 / n**2
    a = np.asarray(perm, dtype=float)
    tx = 2.0 * a[:-1, :] * a[1:, :] / (a[:-1, :] + a[1:, :]) / h2
    ty = 2.0 * a[:, :-1] * a[:, 1:] / (a[:, :-1] + a[:, 1:]) / h2
    diag = np.zeros_like(a)
    diag[:-1, :] += tx
    diag[1:, :] += tx
    diag[:, :-1] += ty
    diag[:, 1:] += ty
    wall = 2.0 / h2
    diag[0, :] += wall * a[0, :]
    diag[-1, :] += wall * a[-1, :]
    diag[:, 0] += wall * a[:, 0]
    diag[:, -1] += wall * a[:, -1]
    return diag, tx, ty


def assemble(perm: np.ndarray) -> sp.csc_matrix:
    """SPD finite-volume matrix for ``-div(a grad .)`` with homogeneous Dirichlet data."""
    n = perm.shape[0]
    diag, tx, ty = _coefficients(perm)
    rx, cx, ry, cy = _stencil(n)
    rows = np.concatenate([np.arange(n * n), rx, cx, ry, cy])
    cols = np.concatenate([np.arange(n * n), cx, rx, cy, ry])
    vals = np.concatenate([diag.ravel(), -tx.ravel(), -tx.ravel(), -ty.ravel(), -ty.ravel()])
    return sp.csc_matrix((vals, (rows, cols)), shape=(n * n, n * n))


def assemble_banded(perm: np.ndarray) -> np.ndarray:
    """Same matrix in LAPACK upper symmetric band storage (bandwidth ``grid_n``)."""
    n = perm.shape[0]
    diag, tx, ty = _coefficients(perm)
    ab = np.zeros((n + 1, n * n))
    ab[n] = diag.ravel()
    up = np.zeros((n, n))
    up[:, 1:] = -ty
    ab[n - 1] = up.ravel()
    up = np.zeros((n, n))
    up[1:, :] = -tx
    ab[0] = up.ravel()
    return ab


class DarcySolver:
    """Parameter-to-observation map for one grid and KL truncation."""

    def __init__(self, grid_n: int, n_modes: int, tau: float = TAU, d: float = REGULARITY):
        self.grid_n = grid_n
        self.field = kl_field(grid_n, n_modes, tau, d)
        c = cell_centers(grid_n)
        self.rhs = np.broadcast_to(source_term(c)[None, :], (grid_n, grid_n)).ravel().copy()
        self.obs_op = observation_operator(grid_n)

    def permeability(self, theta) -> np.ndarray:
        return np.exp(kl_field_eval(self.field, theta))

    def pressure(self, theta) -> np.ndarray:
        return self.pressure_from_permeability(self.permeability(theta))

    def pressure_from_permeability(self, perm: np.ndarray) -> np.ndarray:
        try:
            p = sla.solveh_banded(assemble_banded(perm), self.rhs, check_finite=False)
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise SolverFailure(f"Darcy solve failed: {exc}") from exc
        if not np.all(np.isfinite(p)):
            raise SolverFailure("Darcy solve produced non-finite pressure")
        return p.reshape(self.grid_n, self.grid_n)

    def observe(self, theta) -> np.ndarray:
        return self.obs_op @ self.pressure(theta).ravel()

    __call__ = observe


@dataclass(frozen=True, eq=False)
class DarcyInstance:
    grid_n: int
    n_modes: int
    seed: int
    theta_ref: np.ndarray
    y_ref: np.ndarray
    tau: float = TAU
    d: float = REGULARITY

    @property
    def measurement_points(self) -> np.ndarray:
        return measurement_points()

    def solver(self, grid_n: int | None = None, n_modes: int | None = None) -> DarcySolver:
        return DarcySolver(grid_n or self.grid_n, n_modes or self.n_modes, self.tau, self.d)

    def problem(self, grid_n: int | None = None, n_modes: int | None = None) -> InverseProblem:
        """Inverse problem for ``n_modes`` KL coefficients with prior N(0, I), noise N(0, I)."""
        n_modes = n_modes or self.n_modes
        solver = self.solver(grid_n, n_modes)
        return InverseProblem(
            forward=solver.observe,
            y=self.y_ref,
            noise_cov=np.eye(self.y_ref.size),
            prior_mean=np.zeros(n_modes),
            prior_cov=np.eye(n_modes),
            name="darcy",
            metadata={"grid_n": solver.grid_n, "n_modes": n_modes, "seed": self.seed},
        )

    def to_dict(self) -> dict:
        return {
            "kind": "DarcyInstance",
            "grid_n": self.grid_n,
            "n_modes": self.n_modes,
            "tau": self.tau,
            "d": self.d,
            "seed": self.seed,
            "theta_ref": [float(v) for v in self.theta_ref],
            "y_ref": [float(v) for v in self.y_ref],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DarcyInstance":
        return cls(
            grid_n=int(data["grid_n"]),
            n_modes=int(data["n_modes"]),
            seed=int(data["seed"]),
            theta_ref=np.array(data["theta_ref"], dtype=float),
            y_ref=np.array(data["y_ref"], dtype=float),
            tau=float(data["tau"]),
            d=float(data["d"]),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "DarcyInstance":
        return cls.from_dict(json.loads(Path(path).read_text()))


def darcy_solve(instance: DarcyInstance, theta) -> tuple[np.ndarray, np.ndarray]:
    """Pressure on the instance grid and its 49 point samples."""
    solver = instance.solver(n_modes=max(instance.n_modes, np.size(theta)))
    p = solver.pressure(theta)
    return p, solver.obs_op @ p.ravel()


def darcy_instance(grid_n: int = 80, n_modes: int = 128, seed: int = 0, tau: float = TAU, d: float = REGULARITY) -> DarcyInstance:
    """Draw a truth field, solve, sample, and add N(0, I) noise; all from ``seed``."""
    if grid_n < 16:
        raise ValueError("grid_n must be >= 16")
    rng = np.random.default_rng(seed)
    theta_ref = rng.standard_normal(n_modes)
    obs = DarcySolver(grid_n, n_modes, tau, d).observe(theta_ref)
    y_ref = obs + rng.standard_normal(obs.size)
    return DarcyInstance(grid_n, n_modes, seed, theta_ref, y_ref, tau, d)
