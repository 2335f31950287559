"""Shared oracles and fixtures.

Everything here is written independently of the package internals so the
tests compare against a second implementation, not against themselves.
"""

import numpy as np
import pytest

from diffpmcmc.data import Dataset, synth_logistic


def fd_gradient(f, z, step=1e-5):
    """Central finite-difference gradient of scalar ``f`` at ``z``."""
    z = np.asarray(z, dtype=float)
    g = np.empty_like(z)
    for i in range(z.size):
        e = np.zeros_like(z)
        e[i] = step
        g[i] = (f(z + e) - f(z - e)) / (2 * step)
    return g


def fd_jacobian(F, z, step=1e-5):
    """Central finite-difference Jacobian of vector ``F`` at ``z`` (rows = outputs)."""
    z = np.asarray(z, dtype=float)
    cols = []
    for i in range(z.size):
        e = np.zeros_like(z)
        e[i] = step
        cols.append((F(z + e) - F(z - e)) / (2 * step))
    return np.stack(cols, axis=1)


def rel_err(analytic, reference):
    """Max absolute error scaled by ``max(|reference|, 1)``."""
    analytic = np.asarray(analytic, float)
    reference = np.asarray(reference, float)
    return float(np.max(np.abs(analytic - reference)) / max(np.max(np.abs(reference)), 1.0))


def logistic_logpdf(y, x, beta):
    """Direct Bernoulli evaluation with P(y=1) = 1 / (1 + exp(x @ beta))."""
    a = float(np.dot(x, beta))
    p1 = 1.0 / (1.0 + np.exp(a))
    return np.log(p1) if y == 1 else np.log1p(-p1)


def taylor_proxy_naive(model, clusters, data, theta, rows):
    """Per-row second-order Taylor proxy around each row's centroid, one row at a time."""
    from diffpmcmc.model import grad_hess_z, log_density

    out = []
    for k in rows:
        j = clusters.assignment[k]
        c = clusters.centroids[j]
        z = data.Z[k]
        g, H = grad_hess_z(model, c[0], c[1:], theta)
        b = z - c
        out.append(log_density(model, c[0], c[1:], theta) + g @ b + 0.5 * b @ H @ b)
    return np.array(out)


@pytest.fixture
def small_logistic():
    return synth_logistic(400, 3, [0.3, -0.8, 0.5], seed=5)


@pytest.fixture
def tiny_dataset():
    rng = np.random.default_rng(0)
    X = np.column_stack([np.ones(5), rng.normal(size=(5, 2))])
    y = np.array([1.0, 0.0, 0.0, 1.0, 0.0])
    return Dataset(y=y, X=X, columns=["intercept", "x1", "x2"])


def taylor_proxy_rows(model, clusters, data, theta, rows=None):
    """Vectorized per-row Taylor proxies built from each row's own deviation."""
    rows = clusters.rows if rows is None else np.asarray(rows)
    C = clusters.centroids[clusters.assignment[rows]]
    l, g, H = model.grad_hess_z(C[:, 0], C[:, 1:], theta)
    b = data.Z[rows] - C
    return l + np.sum(g * b, axis=1) + 0.5 * np.einsum("ki,kij,kj->k", b, H, b)


ACCEPTANCE_LINES = []


def record_criterion(number, passed, detail):
    """Store one acceptance line; all lines are printed in the terminal summary."""
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'} | {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
