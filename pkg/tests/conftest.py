from fractions import Fraction

import numpy as np
import pytest


def kalman_form_posterior(G, y, noise_cov, prior_mean, prior_cov):
    """Posterior via the gain form; independent of the precision form used by the library."""
    S = G @ prior_cov @ G.T + noise_cov
    K = np.linalg.solve(S, G @ prior_cov).T
    mean = prior_mean + K @ (y - G @ prior_mean)
    cov = prior_cov - K @ G @ prior_cov
    return mean, 0.5 * (cov + cov.T)


def _inv2(m):
    (a, b), (c, d) = m
    det = a * d - b * c
    return [[d / det, -b / det], [-c / det, a / det]]


def exact_posterior_2d(G_rows, y, noise_var):
    """Exact rational posterior for a 2-parameter problem with prior N(0, I)."""
    G = [[Fraction(v) for v in row] for row in G_rows]
    y = [Fraction(v) for v in y]
    nv = Fraction(noise_var)
    prec = [[sum(G[k][i] * G[k][j] for k in range(len(G))) / nv + (1 if i == j else 0) for j in range(2)] for i in range(2)]
    cov = _inv2(prec)
    rhs = [sum(G[k][i] * y[k] for k in range(len(G))) / nv for i in range(2)]
    mean = [cov[i][0] * rhs[0] + cov[i][1] * rhs[1] for i in range(2)]
    return np.array([float(v) for v in mean]), np.array([[float(v) for v in row] for row in cov])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_spd(rng, n, cond=10.0):
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    lam = np.geomspace(1.0, cond, n)
    return (Q * lam) @ Q.T


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report():
    """Record one PASS/FAIL line per acceptance criterion; printed at session end."""

    def _report(number: int, title: str, ok: bool, detail: str) -> bool:
        line = f"criterion {number:2d} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return _report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
