"""Dual-norm bounds, step constants and a posteriori error bounds.

All quantities here are cheap scalar formulas except :func:`sigma_max`,
which runs a matrix-free power iteration.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from .model import (ConstraintOperator, Dataset, DegenerateGeometryError,
                    Partition, upsilon)


class ConvergenceError(RuntimeError):
    """Raised when an iterative estimate does not settle within its cap."""


ALPHA_FLOOR = 1e-12


@dataclass(frozen=True)
class LinearMap:
    """A linear map given by its forward and adjoint actions."""

    matvec: callable
    rmatvec: callable
    n_in: int
    n_out: int


def operator_map(op: ConstraintOperator, which: str = "C") -> LinearMap:
    """Wrap one of ``A1``, ``A2``, ``A`` or ``C`` as a :class:`LinearMap`."""
    N, n = op.N, op.n
    if which == "A1":
        return LinearMap(op.A1, op.A1T, N, op.m)
    if which == "A2":
        return LinearMap(op.A2, op.A2T, N * n, op.m)
    if which == "A":
        return LinearMap(op.A, op.AT, op.n_var, op.m)
    if which == "C":
        return LinearMap(op.C, op.CT_vec, op.n_var, op.m_cross)
    raise ValueError(f"unknown operator {which!r}")


def sigma_max(operator, tol: float = 1e-8, max_iter: int | None = None,
              seed: int = 0) -> float:
    """Largest singular value by power iteration on the normal map.

    Parameters
    ----------
    operator : LinearMap or ndarray
        The map; a dense array is accepted for convenience.
    tol : float
        Relative change of the Rayleigh quotient at which to stop.
    max_iter : int, optional
        Iteration cap, ``max(10 * n_in, 20000)`` by default.
    seed : int
        Seed for the start vector.

    Raises
    ------
    ConvergenceError
        If ``tol`` is not met within ``max_iter`` iterations.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    if isinstance(operator, np.ndarray):
        M = operator
        operator = LinearMap(lambda v: M @ v, lambda w: M.T @ w, M.shape[1], M.shape[0])
    if operator.n_out == 0 or operator.n_in == 0:
        return 0.0
    if max_iter is None:
        max_iter = max(10 * operator.n_in, 20_000)
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(operator.n_in)
    v /= np.linalg.norm(v)
    lam = None
    for _ in range(max_iter):
        w = operator.rmatvec(operator.matvec(v))
        lam_new = float(v @ w)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v = w / nw
        if lam is not None and abs(lam_new - lam) <= tol * abs(lam_new):
            # one more Rayleigh quotient on the refreshed vector
            lam_new = max(lam_new, float(np.linalg.norm(operator.matvec(v)) ** 2))
            return float(np.sqrt(lam_new))
        lam = lam_new
    raise ConvergenceError(f"power iteration did not reach tol={tol} in {max_iter} steps")


def lipschitz(gamma: float, sigma_c: float) -> float:
    """Gradient Lipschitz constant ``sigma_c**2 / gamma`` of the smoothed dual."""
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    return sigma_c ** 2 / gamma


def _residual_terms(dataset: Dataset):
    p = dataset.y_hat - dataset.values
    q = np.sum((dataset.x_hat - dataset.points) ** 2, axis=1)
    return p, q


def b_theta(gamma: float, alpha: float, dataset: Dataset, ups: float) -> float:
    """Upper bound on the norm of optimal multipliers of the smoothed dual.

    ``(1/(alpha*ups)) sum_l (y_hat - y_l + alpha/2 ||x_hat - x_l||^2)^2
    + (gamma*alpha/ups) sum_l ||x_hat - x_l||^2``.
    """
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    if not ups > 0:
        raise DegenerateGeometryError("minimum cross-block distance is zero")
    p, q = _residual_terms(dataset)
    return float(np.sum((p + 0.5 * alpha * q) ** 2) / (alpha * ups)
                 + gamma * alpha * np.sum(q) / ups)


def b_theta_derivative(gamma: float, alpha: float, dataset: Dataset, ups: float) -> float:
    """d/d alpha of :func:`b_theta`."""
    p, q = _residual_terms(dataset)
    return float((-np.sum(p ** 2) / alpha ** 2 + 0.25 * np.sum(q ** 2)
                  + gamma * np.sum(q)) / ups)


def alpha_star(gamma: float, dataset: Dataset, partition: Partition | None = None,
               floor: float = ALPHA_FLOOR) -> float:
    """Minimizer over ``alpha > 0`` of :func:`b_theta`.

    The bound is convex in ``alpha``; the root of its derivative is bracketed
    by a sign change and refined with Brent's method.  When every residual
    ``y_hat - y_l`` vanishes the infimum is approached as ``alpha -> 0`` and
    ``floor`` is returned with a warning.
    """
    ups = upsilon(dataset, partition)
    if not ups > 0:
        raise DegenerateGeometryError("minimum cross-block distance is zero")
    p, _ = _residual_terms(dataset)
    if not np.any(p):
        warnings.warn("all residuals are zero; returning alpha floor", RuntimeWarning,
                      stacklevel=2)
        return floor

    def deriv(a):
        return b_theta_derivative(gamma, a, dataset, ups)

    lo, hi = 1.0, 1.0
    while deriv(lo) >= 0:
        lo *= 0.5
        if lo < floor:
            return floor
    while deriv(hi) <= 0:
        hi *= 2.0
        if hi > 1e300:
            raise ConvergenceError("could not bracket alpha_star")
    return float(brentq(deriv, lo, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=500))


def error_bounds(gamma: float, delta: float, xi_star_norm: float, N: int, B_x: float):
    """A posteriori bounds for a ``delta``-optimal smoothed-dual iterate.

    Returns
    -------
    subopt_bound : float
        Bound on ``||y - y*||``: ``||xi*|| sqrt(gamma) + sqrt(2 delta)``.
    infeas_bound : float
        Bound on ``||(A eta)_-||``: ``2 sqrt(N delta) + B_x N sqrt(2 delta / gamma)``.
    subgrad_bound : tuple of float
        ``(sqrt(2 N gamma) ||xi*||, sqrt(2 delta / gamma))``; the subgradient
        distance is bounded by an unknown constant times the first entry
        plus the second.
    """
    if delta < 0:
        raise ValueError("delta must be nonnegative")
    if gamma == 0 and delta == 0:
        return 0.0, 0.0, (0.0, 0.0)
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    subopt = xi_star_norm * np.sqrt(gamma) + np.sqrt(2 * delta)
    infeas = 2 * np.sqrt(N * delta) + B_x * N * np.sqrt(2 * delta / gamma)
    subgrad = (float(np.sqrt(2 * N * gamma) * xi_star_norm), float(np.sqrt(2 * delta / gamma)))
    return float(subopt), float(infeas), subgrad
