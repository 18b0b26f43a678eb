"""Primal active-set method for the regularized shape QP.

Solves ``min 0.5 eta^T G eta + c^T eta`` subject to ``A eta >= 0`` with
``G = diag(I_N, gamma I_Nn)`` and ``c = [-ybar; 0]``, starting from the
strictly feasible quadratic through the centroid.  Each search direction
comes from the working-set equality QP; the Gram matrix
``A_W G^{-1} A_W^T`` is kept as a Cholesky factor that is updated, never
refactored, when one row enters or leaves the working set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from .model import (Dataset, PrimalPoint, objective, pair_values,
                    row_index, row_pair, slater_point)
from .reports import ASM_COLUMNS, Clock, SolveReport

DRIFT_CHECK_EVERY = 100
DRIFT_TOL = 1e-8
BLAND_AFTER = 50


class DependentRowError(np.linalg.LinAlgError):
    """Appending the row would make the working set linearly dependent."""


# ----------------------------------------------------------------------------
# constraint rows
# ----------------------------------------------------------------------------


class RowSource:
    """Rows ``a_r`` of ``A`` materialized on demand in the ``G^{-1}`` geometry.

    Row ``r`` belongs to the pair ``(l1, l2)`` and reads
    ``y_l2 - y_l1 + xi_l1.(x_l1 - x_l2)``.
    """

    def __init__(self, points: np.ndarray, gamma: float):
        self.X = np.asarray(points, dtype=float)
        self.gamma = float(gamma)

    @property
    def N(self) -> int:
        return self.X.shape[0]

    def pair(self, r: int) -> tuple[int, int]:
        return row_pair(int(r), self.N)

    def _parts(self, rows):
        rows = np.asarray(rows, dtype=int)
        N = self.N
        l1 = rows // (N - 1)
        rem = rows % (N - 1)
        l2 = rem + (rem >= l1)
        return l1, l2, self.X[l1] - self.X[l2]

    def gram(self, rows_a, rows_b=None) -> np.ndarray:
        """``A_a G^{-1} A_b^T`` from pair overlaps, without forming rows."""
        a1, a2, da = self._parts(rows_a)
        if rows_b is None:
            b1, b2, db = a1, a2, da
        else:
            b1, b2, db = self._parts(rows_b)
        e = lambda u, v: (u[:, None] == v[None, :]).astype(float)
        y_part = e(a1, b1) + e(a2, b2) - e(a1, b2) - e(a2, b1)
        xi_part = e(a1, b1) * (da @ db.T) / self.gamma
        return y_part + xi_part

    def apply(self, rows, eta: PrimalPoint) -> np.ndarray:
        """``A_W eta``."""
        l1, l2, d = self._parts(rows)
        return eta.y[l2] - eta.y[l1] + np.sum(eta.xi[l1] * d, axis=1)

    def apply_t_ginv(self, rows, theta: np.ndarray) -> PrimalPoint:
        """``G^{-1} A_W^T theta``."""
        l1, l2, d = self._parts(rows)
        N, n = self.X.shape
        gy = np.zeros(N)
        np.add.at(gy, l2, theta)
        np.add.at(gy, l1, -theta)
        gxi = np.zeros((N, n))
        np.add.at(gxi, l1, theta[:, None] * d)
        return PrimalPoint(gy, gxi / self.gamma)

    def dense_rows(self, rows) -> np.ndarray:
        N, n = self.X.shape
        l1, l2, d = self._parts(rows)
        M = np.zeros((len(l1), N * (n + 1)))
        k = np.arange(len(l1))
        M[k, l2] += 1.0
        M[k, l1] -= 1.0
        for j in range(n):
            M[k, N + l1 * n + j] = d[:, j]
        return M


# ----------------------------------------------------------------------------
# Cholesky updates
# ----------------------------------------------------------------------------


def chol_append(L: np.ndarray, cross: np.ndarray, diag: float, rel_tol: float = 1e-9) -> np.ndarray:
    """Factor of the Gram matrix with one more row.

    Parameters
    ----------
    L : ndarray, shape (m, m)
        Lower factor of ``B G^{-1} B^T``.
    cross : ndarray, shape (m,)
        ``B G^{-1} a`` for the new row ``a``.
    diag : float
        ``a^T G^{-1} a``.

    Returns
    -------
    ndarray, shape (m+1, m+1)
        ``[[L, 0], [h^T, d]]`` with ``h = L^{-1} B G^{-1} a`` and
        ``d = sqrt(a^T G^{-1} a - h^T h)``.

    Raises
    ------
    DependentRowError
        If ``d^2 <= rel_tol * a^T G^{-1} a``.
    """
    m = L.shape[0]
    h = solve_triangular(L, cross, lower=True) if m else np.zeros(0)
    d2 = float(diag - h @ h)
    if not d2 > rel_tol * max(diag, 0.0):
        raise DependentRowError(f"new row is dependent on the working set (d^2={d2:.3e})")
    out = np.zeros((m + 1, m + 1))
    out[:m, :m] = L
    out[m, :m] = h
    out[m, m] = math.sqrt(d2)
    return out


def cholupdate(L: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Lower factor of ``L L^T + x x^T`` by plane rotations (``O(s^2)``)."""
    L = L.copy()
    x = np.array(x, dtype=float)
    s = L.shape[0]
    for k in range(s):
        r = math.hypot(L[k, k], x[k])
        c, sn = r / L[k, k], x[k] / L[k, k]
        L[k, k] = r
        if k + 1 < s:
            L[k + 1:, k] = (L[k + 1:, k] + sn * x[k + 1:]) / c
            x[k + 1:] = c * x[k + 1:] - sn * L[k + 1:, k]
    return L


def chol_delete(L: np.ndarray, pos: int) -> np.ndarray:
    """Factor of the Gram matrix with row and column ``pos`` removed.

    Rows above ``pos`` are unchanged; the trailing block absorbs the deleted
    column through a rank-one update ``L33 L33^T + h h^T``.
    """
    m = L.shape[0]
    if not 0 <= pos < m:
        raise IndexError(f"position {pos} outside working set of size {m}")
    keep = np.r_[0:pos, pos + 1:m]
    out = L[np.ix_(keep, keep)].copy()
    if pos < m - 1:
        h = L[pos + 1:, pos]
        out[pos:, pos:] = cholupdate(L[pos + 1:, pos + 1:], h)
    return out


# ----------------------------------------------------------------------------
# direction, ratio test, driver
# ----------------------------------------------------------------------------


@dataclass
class WorkingSet:
    """Ordered working-set rows and the factor of their Gram matrix."""

    rows: list = field(default_factory=list)
    L: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    updates: int = 0

    @property
    def size(self) -> int:
        return len(self.rows)


def kkt_direction(src: RowSource, ws: WorkingSet, eta: PrimalPoint, ybar: np.ndarray,
                  refine: int = 2):
    """Equality-QP direction and working-set multipliers.

    Solves ``A_W G^{-1} A_W^T theta = A_W (eta + c)`` with the factor, then
    ``d_eta = G^{-1} A_W^T theta - (eta + c)``; ``c = [-ybar; 0]`` satisfies
    ``G^{-1} c = c``.  ``refine`` rounds of iterative refinement follow.
    """
    shifted = PrimalPoint(eta.y - ybar, eta.xi)
    if ws.size == 0:
        return PrimalPoint(-shifted.y, -shifted.xi), np.zeros(0)
    theta = _gram_solve(ws.L, src.apply(ws.rows, shifted))
    back = src.apply_t_ginv(ws.rows, theta)
    d_eta = PrimalPoint(back.y - shifted.y, back.xi - shifted.xi)
    # refinement: the Gram matrix is ill-conditioned for small gamma, so
    # project the remaining A_W d_eta out of the direction
    for _ in range(refine):
        corr = _gram_solve(ws.L, src.apply(ws.rows, d_eta))
        back = src.apply_t_ginv(ws.rows, corr)
        d_eta = PrimalPoint(d_eta.y - back.y, d_eta.xi - back.xi)
        theta = theta - corr
    return d_eta, theta


def _gram_solve(L: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    z = solve_triangular(L, rhs, lower=True)
    return solve_triangular(L, z, lower=True, trans="T")


def ratio_test(X: np.ndarray, eta: PrimalPoint, d_eta: PrimalPoint, working: set,
               tol: float = 1e-10):
    """Largest step in ``[0, 1]`` keeping every row outside ``working`` feasible.

    A row counts as decreasing when ``a^T d_eta < -tol (1 + max|A d_eta|)``.
    Returns ``(t, blocking)`` where ``blocking`` lists the rows (ascending)
    that reach zero at ``t``; empty when ``t = 1`` is unblocked.
    """
    N = X.shape[0]
    V = pair_values(X, eta.y, eta.xi)
    D = pair_values(X, d_eta.y, d_eta.xi)
    scale = tol * (1.0 + np.max(np.abs(D)))
    dec = D < -scale
    np.fill_diagonal(dec, False)
    if working:
        w = np.array(sorted(working))
        l1 = w // (N - 1)
        rem = w % (N - 1)
        dec[l1, rem + (rem >= l1)] = False
    if not np.any(dec):
        return 1.0, []
    ratios = np.full((N, N), np.inf)
    ratios[dec] = np.maximum(V[dec], 0.0) / -D[dec]
    t = float(ratios.min())
    if t >= 1.0:
        return 1.0, []
    hit = np.argwhere(ratios <= t)
    blocking = sorted(row_index(int(a), int(b), N) for a, b in hit)
    return t, blocking


def _rebuild(src: RowSource, rows) -> np.ndarray:
    if not rows:
        return np.zeros((0, 0))
    return np.linalg.cholesky(src.gram(rows))


def asm_solve(dataset: Dataset, gamma: float, *, alpha: float | None = None,
              iter_cap: int = 100_000, time_cap_s: float = math.inf,
              step_tol: float = 1e-11, mult_tol: float = 1e-10):
    """Active-set solve of the regularized problem.

    Parameters
    ----------
    dataset : Dataset
    gamma : float
        Subgradient regularization weight, positive.
    alpha : float, optional
        Curvature of the starting quadratic, ``1/N`` by default.
    step_tol : float
        A direction with ``||d_eta|| <= step_tol (1 + ||eta||)`` counts as zero.
    mult_tol : float
        Multipliers above ``-mult_tol (1 + max|theta|)`` count as nonnegative.

    Returns
    -------
    eta : PrimalPoint
    theta : dict
        Multipliers keyed by row index (working-set rows at exit).
    report : SolveReport
        Metrics rows ``k, objective, m_k, t_step, wall_ms``.
    """
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    clock = Clock()
    X, ybar = dataset.points, dataset.values
    src = RowSource(X, gamma)
    eta = slater_point(dataset, 1.0 / dataset.N if alpha is None else alpha)
    ws = WorkingSet()
    report = SolveReport("asm", columns=ASM_COLUMNS)
    report.extras.update(rebuilds=0, zero_steps_max=0, bland=False, dependent_skips=0)
    zero_steps = 0
    bland = False
    status = "iter_cap"
    k = 0
    theta = np.zeros(0)
    report.add(k=0, objective=objective(dataset, eta, gamma), m_k=0, t_step=0.0, wall_ms=clock.ms())
    while k < iter_cap:
        if clock.elapsed() >= time_cap_s:
            status = "time_cap"
            break
        k += 1
        d_eta, theta = kkt_direction(src, ws, eta, ybar)
        dn = math.sqrt(float(d_eta.y @ d_eta.y + np.sum(d_eta.xi ** 2)))
        en = math.sqrt(float(eta.y @ eta.y + np.sum(eta.xi ** 2)))
        t_step = 0.0
        if dn <= step_tol * (1.0 + en):
            if ws.size == 0 or theta.min() >= -mult_tol * (1.0 + np.max(np.abs(theta))):
                status = "converged"
                report.add(k=k, objective=objective(dataset, eta, gamma), m_k=ws.size,
                           t_step=0.0, wall_ms=clock.ms())
                break
            neg = np.flatnonzero(theta < 0)
            if bland:
                pos = int(min(neg, key=lambda p: ws.rows[p]))
            else:
                pos = int(np.argmin(theta))
            ws.L = chol_delete(ws.L, pos)
            del ws.rows[pos]
            ws.updates += 1
        else:
            excluded = set(ws.rows)
            while True:
                t_step, blocking = ratio_test(X, eta, d_eta, excluded)
                if not blocking or _append(src, ws, blocking):
                    break
                # rows dependent on the working set only decrease by round-off
                excluded.update(blocking)
                report.extras["dependent_skips"] += len(blocking)
            if t_step > 0:
                eta = PrimalPoint(eta.y + t_step * d_eta.y, eta.xi + t_step * d_eta.xi)
                zero_steps = 0
            else:
                zero_steps += 1
                report.extras["zero_steps_max"] = max(report.extras["zero_steps_max"], zero_steps)
                if zero_steps > BLAND_AFTER and not bland:
                    bland = True
                    report.extras["bland"] = True
        if ws.updates and ws.updates % DRIFT_CHECK_EVERY == 0 and ws.size:
            G = src.gram(ws.rows)
            err = np.linalg.norm(ws.L @ ws.L.T - G) / max(np.linalg.norm(G), 1e-300)
            if err > DRIFT_TOL:
                ws.L = _rebuild(src, ws.rows)
                report.extras["rebuilds"] += 1
        report.add(k=k, objective=objective(dataset, eta, gamma), m_k=ws.size,
                   t_step=t_step, wall_ms=clock.ms())
    report.status = status
    report.iterations = k
    report.walltime_s = clock.elapsed()
    report.extras["working_set"] = list(ws.rows)
    return eta, dict(zip(ws.rows, theta.tolist())), report


def _append(src: RowSource, ws: WorkingSet, blocking) -> bool:
    """Add the lexicographically first blocking row that keeps independence."""
    for r in blocking:
        cross = src.gram(ws.rows, [r])[:, 0] if ws.size else np.zeros(0)
        diag = float(src.gram([r])[0, 0])
        try:
            ws.L = chol_append(ws.L, cross, diag)
        except DependentRowError:
            continue
        ws.rows.append(int(r))
        ws.updates += 1
        return True
    return False
