"""Primal-dual path-following interior-point method for the shape QP.

Solves

    min  0.5 ||y||^2 + 0.5 gamma ||xi||^2 + c^T [y; xi]
    s.t. y_l2 - y_l1 + xi_l1.(x_l1 - x_l2) >= 0   for all pairs l1 != l2

on a given set of locations.  With ``c = [-ybar; 0]`` this is the
regularized convex regression problem; with locations restricted to one
block and ``c`` shifted by dualized coupling terms it is one smoothed-dual
subproblem.

Each Newton step solves the block-arrowhead normal equations through
:mod:`convexreg.arrowhead`.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .arrowhead import NumericalBreakdown, assemble_arrowhead, factor_arrowhead, solve_factored
from .model import ConstraintOperator, Dataset, PrimalPoint, slater_point

FRACTION_TO_BOUNDARY = 0.995


@dataclass
class IpmState:
    """Primal iterate, slacks and multipliers (rows in lexicographic order)."""

    eta: np.ndarray
    s: np.ndarray
    theta: np.ndarray


@dataclass
class IpmReport:
    status: str
    iterations: int
    mu: float
    res_primal: float
    res_dual: float
    objective: float
    dual_value: float
    state: IpmState
    trace: list = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return self.status == "converged"


def _g_diag(N: int, n: int, gamma: float) -> np.ndarray:
    return np.concatenate([np.ones(N), np.full(N * n, gamma)])


def slater_start(op: ConstraintOperator, c: np.ndarray) -> IpmState:
    """Quadratic start through the centroid with curvature ``1/N``; unit multipliers."""
    N = op.N
    data = Dataset(op.X, -c[:N])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        eta = slater_point(data, 1.0 / N).eta
    a = op.A(eta)
    floor = 1e-2 * max(1.0, float(np.mean(np.abs(a)))) if a.size else 1.0
    s = np.maximum(a, floor)
    return IpmState(eta, s, np.ones_like(s))


def dual_feasible_start(op: ConstraintOperator, c: np.ndarray, g: np.ndarray,
                        theta0: float = 1e-2, floor: float = 1.0) -> IpmState:
    """Constant multipliers with the primal point that zeroes the dual residual.

    ``eta = G^{-1}(A^T theta - c)`` so only the primal residual has to be
    driven to zero; slacks are ``max(A eta, floor)``.
    """
    th = np.full(op.m, theta0)
    eta = (op.AT(th) - c) / g
    return IpmState(eta, np.maximum(op.A(eta), floor), th)


def default_start(op: ConstraintOperator, c: np.ndarray, gamma: float,
                  mode: str = "dual") -> IpmState:
    if mode == "slater":
        return slater_start(op, c)
    if mode == "dual":
        return dual_feasible_start(op, c, _g_diag(op.N, op.n, gamma))
    raise ValueError(f"unknown start mode {mode!r}")


def warm_state(prev: IpmState, floor: float = 1e-4) -> IpmState:
    """Previous solution with slacks and multipliers pushed off the boundary."""
    return IpmState(prev.eta.copy(), np.maximum(prev.s, floor), np.maximum(prev.theta, floor))


def ipm_solve(points, c, gamma: float, tol: float = 1e-8, iter_cap: int = 200,
              start: IpmState | None = None, trace: bool = False,
              raise_on_cap: bool = False,
              start_mode: str = "dual") -> tuple[np.ndarray, np.ndarray, IpmReport]:
    """Interior-point solve of the shape QP with linear term ``c``.

    Parameters
    ----------
    points : ndarray, shape (N, n)
        Locations defining the constraint rows.
    c : ndarray, shape (N (n+1),)
        Linear term, ordered as ``[y; xi_1; ...; xi_N]``.
    gamma : float
        Subgradient weight of the quadratic term; must be positive.
    tol : float
        Target for the complementarity ``s.theta/m`` and for the residual
        norms relative to ``1 + ||c||``.
    start : IpmState, optional
        Starting point; slacks and multipliers must be positive.
    start_mode : {"dual", "slater"}
        Cold start used when ``start`` is not given.

    Returns
    -------
    eta : ndarray
    theta : ndarray
        Multipliers of all rows.
    report : IpmReport
    """
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    X = np.asarray(points, dtype=float)
    op = ConstraintOperator(X)
    N, n, m = op.N, op.n, op.m
    c = np.asarray(c, dtype=float)
    if c.shape != (op.n_var,):
        raise ValueError(f"c must have length {op.n_var}")
    g = _g_diag(N, n, gamma)
    cnorm = 1.0 + np.linalg.norm(c)
    if m == 0:
        eta = -c / g
        st = IpmState(eta, np.zeros(0), np.zeros(0))
        obj = float(0.5 * eta @ (g * eta) + c @ eta)
        return eta, np.zeros(0), IpmReport("converged", 0, 0.0, 0.0, 0.0, obj, obj, st)

    st = default_start(op, c, gamma, start_mode) if start is None else IpmState(
        start.eta.copy(), start.s.copy(), start.theta.copy())
    if np.any(st.s <= 0) or np.any(st.theta <= 0):
        raise ValueError("start must have positive slacks and multipliers")
    eta, s, th = st.eta, st.s, st.theta
    rows = []
    last_step = 1.0
    status = "iter_cap"
    it = 0
    tau = None
    while True:
        r_p = op.A(eta) - s
        r_d = g * eta + c - op.AT(th)
        mu = float(s @ th) / m
        rp_n, rd_n = np.linalg.norm(r_p), np.linalg.norm(r_d)
        if trace:
            rows.append((it, mu, rp_n, rd_n, last_step))
        if mu <= tol and rp_n <= tol * cnorm and rd_n <= tol * cnorm:
            status = "converged"
            break
        if it >= iter_cap:
            break
        it += 1
        sigma = 0.1 if last_step >= 0.5 else 0.5
        tau = sigma * mu
        D = th / s
        M = assemble_arrowhead(X, D, gamma, check_positive=False)
        rhs = -r_d + op.AT(tau / s - th - D * r_p)
        try:
            fac = factor_arrowhead(M, tau)
        except NumericalBreakdown:
            if mu <= 10 * tol:
                status = "stalled"
                break
            raise
        d_eta = solve_factored(fac, rhs)
        d_s = op.A(d_eta) + r_p
        d_th = tau / s - th - D * d_s
        alpha = min(1.0, _max_step(s, d_s), _max_step(th, d_th))
        for _ in range(60):
            mu_new = float((s + alpha * d_s) @ (th + alpha * d_th)) / m
            if mu_new <= mu:
                break
            alpha *= 0.5
        eta = eta + alpha * d_eta
        s = s + alpha * d_s
        th = th + alpha * d_th
        # guard against round-off pushing entries to the boundary
        s = np.maximum(s, np.finfo(float).tiny)
        th = np.maximum(th, np.finfo(float).tiny)
        last_step = alpha
        if alpha < 1e-14:
            status = "stalled"
            break
    if status == "iter_cap" and raise_on_cap:
        raise RuntimeError(f"interior-point iteration cap {iter_cap} reached (mu={mu:.3e})")
    obj = float(0.5 * eta @ (g * eta) + c @ eta)
    v = op.AT(th) - c
    dual_value = float(-0.5 * v @ (v / g))
    state = IpmState(eta, s, th)
    rep = IpmReport(status, it, mu, float(rp_n), float(rd_n), obj, dual_value, state, rows)
    return eta, th, rep


def _max_step(v: np.ndarray, dv: np.ndarray) -> float:
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, FRACTION_TO_BOUNDARY * np.min(-v[neg] / dv[neg])))


def full_linear_term(dataset: Dataset) -> np.ndarray:
    return np.concatenate([-dataset.values, np.zeros(dataset.N * dataset.n)])


def ipm_full(dataset: Dataset, gamma: float, tol: float = 1e-9, iter_cap: int = 200,
             trace: bool = False):
    """Solve the whole regularized problem; returns ``(PrimalPoint, theta, report)``.

    The report objective includes the constant ``0.5 ||ybar||^2`` so it equals
    ``0.5 ||y - ybar||^2 + 0.5 gamma ||xi||^2``.
    """
    c = full_linear_term(dataset)
    eta, th, rep = ipm_solve(dataset.points, c, gamma, tol=tol, iter_cap=iter_cap, trace=trace)
    const = 0.5 * float(dataset.values @ dataset.values)
    rep.objective += const
    rep.dual_value += const
    return PrimalPoint.from_eta(eta, dataset.N), th, rep


def block_linear_term(op: ConstraintOperator, dataset: Dataset, i: int,
                      coupling: PrimalPoint | None) -> np.ndarray:
    """Linear term of block ``i``: ``[-ybar_i - gy_i; -gxi_i]`` with ``(gy, gxi) = C^T theta``."""
    sl = op.partition.block(i)
    cy = -dataset.values[sl]
    cx = np.zeros((op.partition.block_size, op.n))
    if coupling is not None:
        cy = cy - coupling.y[sl]
        cx = cx - coupling.xi[sl]
    return np.concatenate([cy, cx.ravel()])


def subproblem_solve(op: ConstraintOperator, i: int, c_i: np.ndarray, gamma: float,
                     tol: float = 1e-8, start: IpmState | None = None,
                     iter_cap: int = 200):
    """Solve the QP of block ``i`` (within-block rows only).

    Returns ``(eta_i, theta_ii, report)`` with ``eta_i`` ordered as
    ``[y_i; xi_i]`` for the block's own observations.  A warm start that breaks
    down numerically is retried once from the cold start.
    """
    part = op.partition
    if part is None:
        raise ValueError("subproblem_solve needs a partitioned operator")
    Xi = op.X[part.block(i)]
    try:
        return ipm_solve(Xi, c_i, gamma, tol=tol, start=start, iter_cap=iter_cap)
    except NumericalBreakdown as exc:
        if start is not None:
            # a warm start near the boundary can leave the Schur complement
            # numerically indefinite; the cold start is well centered
            try:
                return ipm_solve(Xi, c_i, gamma, tol=tol, iter_cap=iter_cap)
            except NumericalBreakdown as cold_exc:
                exc = cold_exc
        raise NumericalBreakdown(f"block {i}: {exc}") from exc
        raise NumericalBreakdown(f"block {i}: {exc}") from exc
