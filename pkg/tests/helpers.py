"""Shared test utilities: independent oracles (Monte Carlo KL, exhaustive
transport enumeration) and a central finite-difference gradient checker.

These stay deliberately independent of the code paths they validate.
"""

from __future__ import annotations

import numpy as np
import torch


def central_difference_grad(fn, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Componentwise central finite differences of a scalar function."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] += h
        up = fn(bumped.reshape(x.shape))
        bumped[i] -= 2 * h
        down = fn(bumped.reshape(x.shape))
        out[i] = (up - down) / (2 * h)
    return grad


def autodiff_grad(fn, x: np.ndarray) -> np.ndarray:
    """Gradient of a scalar torch function at a float64 point."""
    t = torch.as_tensor(np.asarray(x, dtype=np.float64)).requires_grad_(True)
    fn(t).backward()
    return t.grad.detach().numpy()


def relative_grad_error(fn_torch, fn_numpy, x: np.ndarray, h: float = 1e-6) -> float:
    ad = autodiff_grad(fn_torch, x)
    fd = central_difference_grad(fn_numpy, x, h)
    scale = max(np.linalg.norm(fd), 1e-12)
    return float(np.linalg.norm(ad - fd) / scale)


def mc_kl_standard_to_model(mu, sigma, n: int = 10**6, seed: int = 0) -> float:
    """Monte Carlo estimate of KL(N(0, I) || N(mu, diag(sigma^2))) from
    standard-normal draws and exact log densities."""
    rng = np.random.default_rng(seed)
    mu = np.atleast_1d(np.asarray(mu, dtype=np.float64))
    sigma = np.atleast_1d(np.asarray(sigma, dtype=np.float64))
    x = rng.standard_normal((n, mu.size))
    log_p = -0.5 * x**2 - 0.5 * np.log(2 * np.pi)
    log_q = -0.5 * ((x - mu) / sigma) ** 2 - np.log(sigma) - 0.5 * np.log(2 * np.pi)
    return float((log_p - log_q).sum(axis=1).mean())


def enumerate_transport_two_atoms(
    atoms_p, masses_p, atoms_q, masses_q, grid: int = 20001
) -> float:
    """Exhaustive grid enumeration of transport plans between two 2-atom
    distributions; the grid covers the single free parameter of the plan."""
    (x0, x1), (p0, p1) = atoms_p, masses_p
    (y0, y1), (q0, q1) = atoms_q, masses_q
    low = max(0.0, p0 + q0 - 1.0)
    high = min(p0, q0)
    best = np.inf
    for g00 in np.linspace(low, high, grid):
        g01 = p0 - g00
        g10 = q0 - g00
        g11 = p1 - g10
        if min(g01, g10, g11) < -1e-12:
            continue
        cost = (
            g00 * abs(x0 - y0)
            + g01 * abs(x0 - y1)
            + g10 * abs(x1 - y0)
            + g11 * abs(x1 - y1)
        )
        best = min(best, cost)
    return float(best)


def linprog_wasserstein(support_p, p, support_q, q) -> float:
    """Linear-programming optimal transport for small discrete pairs."""
    from scipy.optimize import linprog

    support_p = np.asarray(support_p, dtype=np.float64)
    support_q = np.asarray(support_q, dtype=np.float64)
    n, m = len(support_p), len(support_q)
    cost = np.abs(support_p[:, None] - support_q[None, :]).reshape(-1)
    a_eq = []
    b_eq = []
    for i in range(n):
        row = np.zeros(n * m)
        row[i * m : (i + 1) * m] = 1.0
        a_eq.append(row)
        b_eq.append(p[i])
    for j in range(m):
        row = np.zeros(n * m)
        row[j::m] = 1.0
        a_eq.append(row)
        b_eq.append(q[j])
    result = linprog(cost, A_eq=np.array(a_eq), b_eq=np.array(b_eq), bounds=(0, None))
    assert result.success
    return float(result.fun)


def random_discrete_pair(rng, max_support: int = 8, spread: float = 3.0):
    """A random sorted-support discrete pair for theory tests."""
    from condgan.losses import DiscreteDistributionPair

    k = int(rng.integers(2, max_support + 1))
    support = np.sort(rng.uniform(-spread, spread, k))
    while np.min(np.diff(support)) < 1e-3:
        support = np.sort(rng.uniform(-spread, spread, k))
    p = rng.dirichlet(np.ones(k))
    q = rng.dirichlet(np.ones(k))
    return DiscreteDistributionPair(support=support, p=p, q=q)
