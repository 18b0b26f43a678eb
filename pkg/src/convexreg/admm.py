"""Three-block ADMM for the unregularized shape-constrained least squares problem.

Pairs ``(i, j)`` range over all ``N x N`` ordered index pairs, diagonal
included.  The constraint for a pair is written with a sign-free residual
variable ``nu_ij <= 0``::

    nu_ij + y_i - y_j - Delta_ij . xi_j = 0,    Delta_ij = x_i - x_j,

and the blocks ``xi``, ``y`` and ``nu`` are updated in turn, followed by a
multiplier step.  The pair ``(i, j)`` corresponds to the shape-constraint row
``(l1, l2) = (j, i)``; at a solution ``nu = -(A eta)`` and the multipliers are
the negated multipliers of that row.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import (ConstraintOperator, Dataset, DegenerateGeometryError, PrimalPoint,
                    accuracy, infeasibility, objective)
from .reports import Clock, SolveReport, StopRule

DIVERGENCE_FACTOR = 10.0
DIVERGENCE_WINDOW = 500


class DivergenceError(RuntimeError):
    """Residuals stayed far above their running minimum for a whole window."""


@dataclass(frozen=True)
class AdmmCache:
    """Locations and the inverted ``n x n`` blocks ``(sum_i Delta_ij Delta_ij^T)^{-1}``."""

    X: np.ndarray
    delta_bar: np.ndarray

    @property
    def N(self) -> int:
        return self.X.shape[0]


@dataclass
class AdmmState:
    """ADMM iterate; pair arrays are indexed ``[i, j]``."""

    xi: np.ndarray
    y: np.ndarray
    nu: np.ndarray
    theta: np.ndarray
    w: np.ndarray
    rho: float

    def copy(self) -> "AdmmState":
        return AdmmState(self.xi.copy(), self.y.copy(), self.nu.copy(), self.theta.copy(),
                         self.w.copy(), self.rho)

    @classmethod
    def zeros(cls, N: int, n: int, rho: float) -> "AdmmState":
        return cls(np.zeros((N, n)), np.zeros(N), np.zeros((N, N)), np.zeros((N, N)),
                   np.zeros(N), float(rho))


def admm_precompute(dataset: Dataset) -> AdmmCache:
    """Invert ``sum_i (x_i - x_j)(x_i - x_j)^T`` for every ``j``.

    Raises
    ------
    DegenerateGeometryError
        Naming the first ``j`` whose block is singular.
    """
    X = dataset.points
    N, n = X.shape
    out = np.empty((N, n, n))
    for j in range(N):
        Dj = X - X[j]
        S = Dj.T @ Dj
        try:
            F = np.linalg.cholesky(S)
        except np.linalg.LinAlgError:
            F = None
        if F is None or np.min(np.diag(F)) ** 2 <= 1e-13 * max(np.trace(S), 1e-300):
            raise DegenerateGeometryError(
                f"difference block of point {j} is singular; the locations do not "
                "span R^n around it")
        inv_F = np.linalg.inv(F)
        out[j] = inv_F.T @ inv_F
    return AdmmCache(X.copy(), out)


def D_apply(y: np.ndarray) -> np.ndarray:
    """``(D y)_ij = y_j - y_i`` as an ``N x N`` array (zero diagonal)."""
    return y[None, :] - y[:, None]


def D_adjoint(Z: np.ndarray) -> np.ndarray:
    """``D^T z``: column sums minus row sums."""
    return Z.sum(axis=0) - Z.sum(axis=1)


def _delta_xi(X: np.ndarray, xi: np.ndarray) -> np.ndarray:
    """``[Delta_ij . xi_j]_{ij}``."""
    P = X @ xi.T
    return P - np.diag(P)[None, :]


def admm_step(state: AdmmState, cache: AdmmCache, ybar: np.ndarray) -> AdmmState:
    """One sweep ``xi -> nu~ -> w -> y -> nu -> theta``."""
    X, rho = cache.X, state.rho
    N = X.shape[0]
    # 1: per-point least squares for the subgradients
    R = state.theta / rho + state.nu + state.y[:, None] - state.y[None, :]
    rhs = R.T @ X - R.sum(axis=0)[:, None] * X
    xi = np.einsum("jab,jb->ja", cache.delta_bar, rhs)
    dx = _delta_xi(X, xi)
    # 2
    nu_tilde = state.nu - dx
    # 3-4: (I + rho D^T D) y = w with D^T D = 2 (N I - 1 1^T)
    w = ybar + D_adjoint(state.theta) + rho * D_adjoint(nu_tilde)
    y = (w + 2.0 * rho * w.sum()) / (1.0 + 2.0 * N * rho)
    # 5: residual variables stay nonpositive
    base = y[None, :] + dx - y[:, None]
    nu = np.minimum(base - state.theta / rho, 0.0)
    # 6
    theta = state.theta + rho * (nu - base)
    return AdmmState(xi, y, nu, theta, w, rho)


def state_from_kkt(dataset: Dataset, model: PrimalPoint, theta_rows: np.ndarray,
                   rho: float = 1.0) -> AdmmState:
    """ADMM state built from a primal point and shape-row multipliers.

    ``nu_ij = -(A eta)_{(j, i)}`` and ``theta_ij = -theta_{(j, i)}``; the
    diagonal pairs get zero.
    """
    op = ConstraintOperator(dataset.points)
    Z = op.pairs(model)          # Z[l1, l2]
    Th = op.to_pairs(np.asarray(theta_rows, dtype=float))
    nu = -Z.T
    np.fill_diagonal(nu, 0.0)
    state = AdmmState(model.xi.copy(), model.y.copy(), nu, -Th.T, np.zeros(dataset.N), float(rho))
    return state


def theta_rows(op: ConstraintOperator, state: AdmmState) -> np.ndarray:
    """Multipliers in shape-row order and sign convention."""
    return op.from_pairs(-state.theta.T)


def _residuals(prev: AdmmState, new: AdmmState, X: np.ndarray) -> tuple[float, float]:
    base = new.y[:, None] - new.y[None, :] - _delta_xi(X, new.xi)
    primal = float(np.linalg.norm(new.nu + base))
    dual = float(new.rho * np.linalg.norm(D_apply(new.y - prev.y)))
    return primal, dual


def admm_solve(dataset: Dataset, rho: float = 1.0, stop: StopRule | None = None, *,
               state: AdmmState | None = None, cache: AdmmCache | None = None,
               raise_on_divergence: bool = True):
    """Run ADMM on the unregularized problem.

    Parameters
    ----------
    dataset : Dataset
    rho : float
        Penalty parameter, positive.
    stop : StopRule
        Gap regime: normalized infeasibility and
        ``|theta^T A eta| / (N^2 - N)``; accuracy regime when ``y_star`` is
        set.
    state : AdmmState, optional
        Starting iterate (zeros by default).
    raise_on_divergence : bool
        Raise :class:`DivergenceError` when residuals stay above ten times
        their running minimum for 500 consecutive iterations; otherwise stop
        with status ``"diverged"``.

    Returns
    -------
    eta : PrimalPoint
    theta : ndarray
        Multipliers in shape-row order.
    report : SolveReport
    """
    if not rho > 0:
        raise ValueError("rho must be positive")
    stop = stop or StopRule()
    clock = Clock()
    report = SolveReport("admm")
    if cache is None:
        cache = admm_precompute(dataset)
        report.preprocess_s = clock.elapsed()
    N, n = dataset.N, dataset.n
    op = ConstraintOperator(dataset.points)
    st = AdmmState.zeros(N, n, rho) if state is None else state.copy()
    st.rho = float(rho)
    best_res = math.inf
    above = 0
    status = "iter_cap"
    k = 0
    eta = PrimalPoint(st.y, st.xi)
    while True:
        if k >= stop.iter_cap:
            break
        if clock.elapsed() >= stop.time_cap_s:
            status = "time_cap"
            break
        new = admm_step(st, cache, dataset.values)
        k += 1
        r_p, r_d = _residuals(st, new, cache.X)
        st = new
        eta = PrimalPoint(st.y, st.xi)
        infeas = infeasibility(dataset, eta)
        th = theta_rows(op, st)
        gap = float(th @ op.A(eta)) / (N * N - N)
        acc = accuracy(eta, stop.y_star) if stop.y_star is not None else None
        report.add(k=k, g_value=objective(dataset, eta, 0.0), gap_norm=gap, infeas_norm=infeas,
                   step=st.rho, stage=0, wall_ms=clock.ms())
        if stop.met(infeas, gap, acc):
            status = "converged"
            break
        combined = r_p + r_d
        if not math.isfinite(combined):
            above = DIVERGENCE_WINDOW
        elif combined < best_res:
            best_res = combined
            above = 0
        elif combined > DIVERGENCE_FACTOR * best_res:
            above += 1
        else:
            above = 0
        if above >= DIVERGENCE_WINDOW:
            status = "diverged"
            if raise_on_divergence:
                raise DivergenceError(
                    f"ADMM residual {combined:.3e} exceeded {DIVERGENCE_FACTOR:g}x its minimum "
                    f"{best_res:.3e} for {DIVERGENCE_WINDOW} iterations (rho={rho:g}); "
                    "try a different rho")
            break
    report.status = status
    report.iterations = k
    report.walltime_s = clock.elapsed()
    report.extras["state"] = st
    return eta, theta_rows(op, st), report


def rho_sweep(dataset: Dataset, rhos=None, stop: StopRule | None = None):
    """Run :func:`admm_solve` over log-spaced penalties; returns ``[(rho, report)]``."""
    rhos = np.logspace(-2, 2, 5) if rhos is None else rhos
    cache = admm_precompute(dataset)
    out = []
    for r in rhos:
        _, _, rep = admm_solve(dataset, float(r), stop, cache=cache, raise_on_divergence=False)
        out.append((float(r), rep))
    return out
