"""Cyclic coordinate-descent LASSO and a plug-in penalty rule.

Objective: ``(1/n) * ||y - X g||^2 + delta * ||g||_1`` (no intercept; callers
center ``y`` and standardize ``X``).
"""
from __future__ import annotations

import math

import numba
import numpy as np

from .errors import ConfigurationError, ConvergenceError


@numba.njit(cache=True)
def _coordinate_descent(G, c, delta, tol, max_sweeps):
    p = c.shape[0]
    g = np.zeros(p)
    q = np.zeros(p)  # q = G @ g
    half = 0.5 * delta
    for sweep in range(1, max_sweeps + 1):
        biggest = 0.0
        for j in range(p):
            gjj = G[j, j]
            if gjj <= 0.0:
                continue
            rho = c[j] - q[j] + gjj * g[j]
            if rho > half:
                new = (rho - half) / gjj
            elif rho < -half:
                new = (rho + half) / gjj
            else:
                new = 0.0
            diff = new - g[j]
            if diff != 0.0:
                for k in range(p):
                    q[k] += G[k, j] * diff
                g[j] = new
                if abs(diff) > biggest:
                    biggest = abs(diff)
        if biggest < tol:
            return g, sweep
    return g, -1


def lasso_objective(y, X, gamma, delta) -> float:
    r = np.asarray(y) - np.asarray(X) @ gamma
    return float(r @ r / r.shape[0] + delta * np.sum(np.abs(gamma)))


def lasso_solve(y, X, delta: float, *, tol: float = 1e-8, max_sweeps: int = 10000) -> np.ndarray:
    """Minimise the LASSO objective by cyclic coordinate descent (fixed column order)."""
    if delta < 0:
        raise ConfigurationError("LASSO penalty must be non-negative")
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    n = y.shape[0]
    G = np.ascontiguousarray(X.T @ X / n)
    c = X.T @ y / n
    gamma, sweeps = _coordinate_descent(G, c, float(delta), float(tol), int(max_sweeps))
    if sweeps < 0:
        raise ConvergenceError(f"coordinate descent did not converge in {max_sweeps} sweeps")
    return gamma


def plug_in_penalty(sigma: float, n: int, p: int, *, alpha: float = 0.05, constant: float = 1.1) -> float:
    """``constant * sigma * sqrt(2 log(2p / alpha) / n)``."""
    return constant * sigma * math.sqrt(2.0 * math.log(2.0 * p / alpha) / n)


def lasso_select(y, X, *, alpha: float = 0.05, constant: float = 1.1, refinements: int = 2,
                 delta: float | None = None) -> tuple[np.ndarray, float]:
    """Fit with the plug-in penalty, re-estimating sigma from the residuals.

    Returns ``(coefficients, final_delta)``. A fixed ``delta`` skips the rule.
    """
    y = np.asarray(y, dtype=float)
    n, p = np.shape(X)
    if delta is not None:
        return lasso_solve(y, X, delta), float(delta)
    sigma = float(np.std(y))
    for _ in range(refinements + 1):
        delta = plug_in_penalty(sigma, n, p, alpha=alpha, constant=constant)
        gamma = lasso_solve(y, X, delta)
        resid = y - X @ gamma
        sigma = float(np.sqrt(resid @ resid / n))
    return gamma, delta
