"""Parallel accelerated proximal gradient ascent on the smoothed partial dual.

Only the cross-block shape constraints are dualized.  For multipliers
``theta >= 0`` the inner minimization over the within-block feasible set
splits into ``K`` independent block QPs, solved here by the structured
interior-point method.  The dual function ``g_gamma`` is concave with a
``sigma_max(C)^2 / gamma`` Lipschitz gradient ``-C eta(theta)``.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .bounds import alpha_star, b_theta, error_bounds, lipschitz, operator_map, sigma_max
from .ipm import IpmState, block_linear_term, subproblem_solve, warm_state
from .model import (ConstraintOperator, Dataset, DegenerateGeometryError, Partition,
                    PrimalPoint, accuracy,
                    duality_gap, infeasibility, max_affine_round, objective,
                    pair_values, slater_point, upsilon)
from .reports import BOUND_COLUMNS, DUAL_COLUMNS, Clock, SolveReport, StopRule


class BacktrackingError(RuntimeError):
    """The adaptive step test kept failing; the gradient and values disagree."""


def default_tolerance(k: int) -> float:
    """Subproblem tolerance at outer iteration ``k``: ``min(1e-6, 1e-2 / k^2)``."""
    return min(1e-6, 1e-2 / max(k, 1) ** 2)


def momentum_next(t: float) -> float:
    return 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))


# ----------------------------------------------------------------------------
# dual function
# ----------------------------------------------------------------------------


@dataclass
class DualValue:
    """One evaluation of the smoothed dual.

    Attributes
    ----------
    g : float
        Partial Lagrangian at the computed minimizer.
    g_lower : float
        Sum of the block QP dual values; a lower bound on ``g_gamma(theta)``.
    eta : PrimalPoint
        Block minimizers stacked in observation order.
    grad : ndarray
        ``-C eta``.
    newton_steps : int
        Interior-point iterations summed over blocks.
    """

    theta: np.ndarray
    g: float
    g_lower: float
    eta: PrimalPoint
    grad: np.ndarray
    newton_steps: int


class SmoothedDual:
    """Evaluates ``g_gamma`` and its gradient through ``K`` block solves.

    Parameters
    ----------
    dataset : Dataset
    partition : Partition
    gamma : float
        Subgradient regularization weight, positive.
    workers : int, optional
        Thread count for the block solves; defaults to ``CONVEXREG_WORKERS``
        or ``K``.  One worker runs the blocks sequentially.
    warm_start : bool
        Start each block solve from its previous solution.

    Notes
    -----
    Block results are combined in fixed block order, so values do not depend
    on the worker count.
    """

    def __init__(self, dataset: Dataset, partition: Partition, gamma: float,
                 workers: int | None = None, warm_start: bool = True):
        if not gamma > 0:
            raise ValueError("gamma must be positive")
        partition.check(dataset.n)
        self.dataset = dataset
        self.partition = partition
        self.gamma = float(gamma)
        self.op = ConstraintOperator(dataset.points, partition)
        self.warm_start = warm_start
        self.workers = resolve_workers(workers, partition.K)
        self._pool = ThreadPoolExecutor(self.workers) if self.workers > 1 else None
        self._states: list[IpmState | None] = [None] * partition.K
        self._const = 0.5 * float(dataset.values @ dataset.values)
        self.evaluations = 0

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _solve_block(self, i, coupling, tol):
        c_i = block_linear_term(self.op, self.dataset, i, coupling)
        prev = self._states[i] if self.warm_start else None
        start = warm_state(prev, floor=max(tol, 1e-10)) if prev is not None else None
        return subproblem_solve(self.op, i, c_i, self.gamma, tol=tol, start=start)

    def evaluate(self, theta: np.ndarray, tol: float = 1e-8) -> DualValue:
        theta = np.asarray(theta, dtype=float)
        coupling = self.op.CT(theta) if theta.size else None
        blocks = range(self.partition.K)
        if self._pool is None:
            results = [self._solve_block(i, coupling, tol) for i in blocks]
        else:
            results = list(self._pool.map(lambda i: self._solve_block(i, coupling, tol), blocks))
        N, n, nb = self.dataset.N, self.dataset.n, self.partition.block_size
        y = np.empty(N)
        xi = np.empty((N, n))
        g = g_low = self._const
        steps = 0
        for i, (eta_i, _, rep) in enumerate(results):
            sl = self.partition.block(i)
            y[sl] = eta_i[:nb]
            xi[sl] = eta_i[nb:].reshape(nb, n)
            g += rep.objective
            g_low += rep.dual_value
            steps += rep.iterations
            self._states[i] = rep.state
        eta = PrimalPoint(y, xi)
        grad = -self.op.C(eta)
        self.evaluations += 1
        return DualValue(theta.copy(), float(g), float(g_low), eta, grad, steps)

    __call__ = evaluate


def resolve_workers(workers: int | None, K: int) -> int:
    if workers is None:
        env = os.environ.get("CONVEXREG_WORKERS")
        workers = int(env) if env else K
    if workers < 1:
        raise ValueError("worker count must be positive")
    return min(workers, K)


def eval_dual(dataset: Dataset, partition: Partition, theta: np.ndarray, gamma: float,
              tol: float = 1e-8):
    """One-shot ``(g_value, eta, gradient)`` without warm starts."""
    with SmoothedDual(dataset, partition, gamma, workers=1, warm_start=False) as dual:
        dv = dual.evaluate(theta, tol)
    return dv.g, dv.eta, dv.grad


# ----------------------------------------------------------------------------
# outer iterations
# ----------------------------------------------------------------------------


@dataclass
class PapgState:
    """Iterates of the outer loop.

    ``s`` is the step denominator: ``L_gamma`` for constant steps, the current
    adaptive estimate otherwise.  ``eta`` and ``g`` belong to the extrapolated
    point at which the last gradient was taken.
    """

    theta: np.ndarray
    theta_prev: np.ndarray
    theta_tilde: np.ndarray
    t: float
    s: float
    eta: PrimalPoint | None = None
    g: float = -math.inf
    k: int = 0
    at_theta: DualValue | None = None

    @classmethod
    def initial(cls, theta0: np.ndarray, s0: float) -> "PapgState":
        th = np.maximum(np.asarray(theta0, dtype=float), 0.0)
        return cls(th.copy(), th.copy(), th.copy(), 1.0, float(s0))


def _advance(state: PapgState, dv: DualValue, theta_new: np.ndarray, s: float,
             at_theta: DualValue | None) -> PapgState:
    t_next = momentum_next(state.t)
    tilde = theta_new + ((state.t - 1.0) / t_next) * (theta_new - state.theta)
    return PapgState(theta_new, state.theta, tilde, t_next, s, dv.eta, dv.g, state.k + 1, at_theta)


def papg_step_constant(state: PapgState, dual: SmoothedDual, tol: float,
                       track_primal_at_theta: bool = False):
    """One iteration with step ``1 / L_gamma`` (``state.s``).

    Returns ``(new_state, dual_value_at_extrapolated_point)``.
    """
    dv = dual.evaluate(state.theta_tilde, tol)
    theta_new = np.maximum(state.theta_tilde + dv.grad / state.s, 0.0)
    at = dual.evaluate(theta_new, tol) if track_primal_at_theta else None
    return _advance(state, dv, theta_new, state.s, at), dv


def papg_step_adaptive(state: PapgState, dual: SmoothedDual, tol: float,
                       growth: float = 2.0, max_backtracks: int = 60,
                       curvature_bound: float | None = None, tol_floor: float = 1e-13):
    """One iteration with the backtracking rule ``s_k = s_{k-1} growth^(l-1)``.

    The smallest ``l >= 0`` is taken for which

        g(theta) >= g(theta~) + <grad g(theta~), theta - theta~> - s/2 ||theta - theta~||^2

    holds in the computed values.  Returns ``(new_state, dual_value, info)``
    where ``info`` carries the accepted ``s``, the number of trials, the
    margin of the inequality (nonnegative by construction), the subproblem
    tolerance finally used, and the extrapolated point and gradient the test
    was built from.

    When ``curvature_bound`` (the Lipschitz constant) is given, a failure at
    ``s >= curvature_bound`` can only come from inexact block solves; both
    points are then re-evaluated with a hundredfold tighter tolerance, down to
    ``tol_floor``.

    Raises
    ------
    BacktrackingError
        If ``max_backtracks`` trials fail.
    """
    if not growth > 1:
        raise ValueError("growth factor must exceed one")
    dv = dual.evaluate(state.theta_tilde, tol)
    trials = 0
    ell = 0
    while ell <= max_backtracks:
        s_try = state.s * growth ** (ell - 1)
        theta_try = np.maximum(state.theta_tilde + dv.grad / s_try, 0.0)
        d = theta_try - state.theta_tilde
        trials += 1
        if not np.any(d):
            at = replace(dv, theta=theta_try)
            margin = 0.0
        else:
            at = dual.evaluate(theta_try, tol)
            model = dv.g + float(dv.grad @ d) - 0.5 * s_try * float(d @ d)
            margin = at.g - model
        if margin >= 0.0:
            info = {"s": s_try, "trials": trials, "margin": margin, "g_theta": at.g,
                    "g_tilde": dv.g, "tol": tol, "theta_tilde": state.theta_tilde,
                    "grad": dv.grad}
            return _advance(state, dv, theta_try, s_try, at), dv, info
        if curvature_bound is not None and s_try >= curvature_bound and tol > tol_floor:
            tol = max(tol * 1e-2, tol_floor)
            dv = dual.evaluate(state.theta_tilde, tol)
            continue
        ell += 1
    raise BacktrackingError(
        f"adaptive step test failed {trials} times (s={s_try:.3e}, tol={tol:.1e}); "
        "gradient and dual values are inconsistent, tighten the subproblem tolerance")


# ----------------------------------------------------------------------------
# drivers
# ----------------------------------------------------------------------------


def _cross_theta(op: ConstraintOperator, theta_full: np.ndarray) -> np.ndarray:
    """Restrict multipliers of all rows (lexicographic) to the cross-block rows."""
    return op.cross_from_pairs(op.to_pairs(theta_full))


def papg_solve(dataset: Dataset, gamma: float, K: int | Partition = 2, *,
               theta0: np.ndarray | None = None, stop: StopRule | None = None,
               step_mode: str = "adaptive", growth: float = 2.0,
               sigma_c: float | None = None, workers: int | None = None,
               tolerance=default_tolerance, track_primal_at_theta: bool = False,
               dual: SmoothedDual | None = None, stage: int = 0,
               certificate_gamma: float | None = None, delta_target: float | None = None,
               certify: bool = False, certify_every: int = 1,
               xi_star_norm: float | None = None, check=None):
    """Run P-APG on the smoothed dual.

    Parameters
    ----------
    dataset : Dataset
    gamma : float
        Regularization weight, positive.
    K : int or Partition
        Number of contiguous blocks.
    theta0 : ndarray, optional
        Starting multipliers of the cross-block rows (zero by default).
    stop : StopRule
        Thresholds and caps.
    step_mode : {"adaptive", "constant"}
    growth : float
        Backtracking factor of the adaptive rule.
    sigma_c : float, optional
        Precomputed ``sigma_max(C)``; estimated by power iteration otherwise
        (timed as preprocessing).
    tolerance : callable
        Map from the outer iteration number to the subproblem tolerance.
    track_primal_at_theta : bool
        Also evaluate the dual at each projected iterate (free in adaptive
        mode).  Needed for dual-value envelopes and certificates.
    delta_target : float, optional
        Stop as soon as the certified dual suboptimality drops to this value
        (used by continuation).  The certificate is the best objective over
        feasible roundings of the iterates minus the block dual lower bound.
    certify : bool
        Compute the certificate at every iteration and add the bound columns
        ``b_theta, alpha_star, L_gamma, subopt_bound, infeas_bound`` to the
        metrics rows.  The two error bounds use the certificate as ``delta``
        and refer to the minimizer at the projected iterate; they are
        unnormalized norms.
    certify_every : int
        With constant steps, certify only every ``certify_every`` iterations,
        since each certificate costs one extra dual evaluation; the bound
        columns of the other rows are left empty.  Adaptive steps evaluate
        the projected iterate anyway and certify every iteration.
    xi_star_norm : float, optional
        ``||xi*||`` for ``subopt_bound``; the norm of the current subgradients
        is used as a surrogate when omitted.
    check : callable, optional
        Called as ``check(k, state, info)`` after every iteration.

    Returns
    -------
    eta : PrimalPoint
        Primal iterate of the final or best iteration.
    theta : ndarray
    report : SolveReport
        ``status`` is ``"converged"`` or the cap reached; ``extras`` holds the
        step sizes, adaptive margins and, when tracked, the dual values at the
        projected iterates.
    """
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    if step_mode not in ("adaptive", "constant"):
        raise ValueError(f"unknown step mode {step_mode!r}")
    stop = stop or StopRule()
    part = K if isinstance(K, Partition) else Partition(dataset.N, K)
    own_dual = dual is None
    if own_dual:
        dual = SmoothedDual(dataset, part, gamma, workers=workers)
    op = dual.op
    clock = Clock()
    report = SolveReport("papg-a" if step_mode == "adaptive" else "papg-c")
    if sigma_c is None:
        sigma_c = sigma_max(operator_map(op, "C")) if op.m_cross else 0.0
        report.preprocess_s = clock.elapsed()
    L = lipschitz(gamma, sigma_c) if sigma_c > 0 else 1.0
    theta0 = np.zeros(op.m_cross) if theta0 is None else np.asarray(theta0, dtype=float)
    if theta0.shape != (op.m_cross,):
        theta0 = _cross_theta(op, theta0)
    state = PapgState.initial(theta0, L)
    if certify_every < 1:
        raise ValueError("certify_every must be at least one")
    if delta_target is not None:
        certify, certify_every = True, 1
    tracked = track_primal_at_theta or step_mode == "adaptive" or delta_target is not None
    bound_row = {}
    if certify and delta_target is None:
        report.columns = DUAL_COLUMNS + BOUND_COLUMNS
        try:
            a_star = alpha_star(gamma, dataset, part)
            b_star = b_theta(gamma, a_star, dataset, upsilon(dataset, part))
        except DegenerateGeometryError:
            a_star = b_star = math.nan
        bound_row = {"b_theta": b_star, "alpha_star": a_star, "L_gamma": L}
    report.extras.update(L_gamma=L, sigma_c=sigma_c, margins=[], steps=[], g_theta=[],
                         g_tilde=[], eta_theta=[], newton_steps=0, certificates=[])
    cert_gamma = gamma if certificate_gamma is None else certificate_gamma
    p_hat = math.inf
    N = dataset.N
    best = None
    final = None
    status = "iter_cap"
    tol_cap = math.inf
    try:
        while True:
            if state.k >= stop.iter_cap:
                status = "iter_cap"
                break
            if clock.elapsed() >= stop.time_cap_s:
                status = "time_cap"
                break
            tol = min(tolerance(state.k + 1), tol_cap)
            info = {}
            if step_mode == "adaptive":
                state, dv, info = papg_step_adaptive(state, dual, tol, growth,
                                                     curvature_bound=L)
                tol_cap = info["tol"]
                report.extras["margins"].append(info["margin"])
            else:
                track_now = tracked or (certify and (state.k + 1) % certify_every == 0)
                state, dv = papg_step_constant(state, dual, tol, track_now)
            at = state.at_theta
            steps_k = dv.newton_steps + (at.newton_steps if at is not None and at is not dv else 0)
            report.extras["newton_steps"] += steps_k
            report.extras["steps"].append(1.0 / state.s)
            report.extras["g_tilde"].append(dv.g)
            if at is not None:
                report.extras["g_theta"].append((at.g, at.g_lower))
                report.extras["eta_theta"].append(at.eta)
            eta = dv.eta
            infeas = infeasibility(dataset, eta)
            gap = duality_gap(op, state.theta, eta)
            acc = accuracy(eta, stop.y_star) if stop.y_star is not None else None
            cert = None
            bounds = {}
            if certify and at is not None:
                for cand in (at.eta, eta):
                    p_hat = min(p_hat, _rounded_objective(dataset, cand, cert_gamma))
                cert = p_hat - at.g_lower
                report.extras["certificates"].append(cert)
                if bound_row:
                    xi_norm = (np.linalg.norm(at.eta.xi) if xi_star_norm is None
                               else xi_star_norm)
                    sub_b, inf_b, _ = error_bounds(gamma, max(cert, 0.0), xi_norm, N,
                                                   dataset.B_x)
                    bounds = dict(subopt_bound=sub_b, infeas_bound=inf_b)
            report.add(k=state.k, g_value=dv.g, gap_norm=gap, infeas_norm=infeas,
                       step=1.0 / state.s, stage=stage, wall_ms=clock.ms(), **bound_row,
                       **bounds)
            score = stop.excess(infeas, gap, acc)
            if best is None or score < best[0]:
                best = (score, eta, state.theta.copy(), state.k)
            if check is not None:
                check(state.k, state, info)
            if delta_target is not None and cert is not None and cert <= delta_target:
                status = "certified"
                final = (at.eta, state.theta.copy())
                break
            if stop.met(infeas, gap, acc):
                status = "converged"
                final = (eta, state.theta.copy())
                break
    finally:
        if own_dual:
            dual.close()
    if final is None:
        final = (best[1], best[2]) if best is not None else (
            PrimalPoint(np.zeros(N), np.zeros((N, dataset.n))), state.theta)
    report.status = status
    report.iterations = state.k
    report.walltime_s = clock.elapsed()
    report.extras["best_iteration"] = best[3] if best is not None else 0
    report.extras["p_hat"] = p_hat
    return final[0], final[1], report


def _rounded_objective(dataset: Dataset, eta: PrimalPoint, gamma: float) -> float:
    """Smallest objective over two feasible roundings of ``eta``."""
    return min(objective(dataset, max_affine_round(dataset, eta), gamma),
               objective(dataset, slater_round(dataset, eta), gamma))


def slater_round(dataset: Dataset, eta: PrimalPoint) -> PrimalPoint:
    """Feasible point on the segment from ``eta`` to a Slater point.

    Along ``(1 - lam) eta + lam eta_slater`` every constraint value is affine
    in ``lam`` and positive at ``lam = 1``, so the smallest feasible ``lam``
    is the largest root over the violated rows.  It is nudged upward until
    the mixed point is feasible in floating point.
    """
    sp = slater_point(dataset, 1.0 / dataset.N)

    def mix(lam):
        return PrimalPoint((1 - lam) * eta.y + lam * sp.y, (1 - lam) * eta.xi + lam * sp.xi)

    v0 = pair_values(dataset.points, eta.y, eta.xi)
    violated = v0 < 0
    np.fill_diagonal(violated, False)
    if not violated.any():
        return eta
    v1 = pair_values(dataset.points, sp.y, sp.xi)
    lam = float(np.max(-v0[violated] / (v1[violated] - v0[violated])))
    step = 4 * np.finfo(float).eps
    while lam < 1.0 and infeasibility(dataset, mix(lam)) > 0.0:
        lam = min(1.0, lam + step)
        step *= 4.0
    return mix(lam)


# ----------------------------------------------------------------------------
# continuation
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class ContinuationSchedule:
    """Geometric schedule ``eps_t = eps0 / beta^t``, ``gamma_t = kappa_gamma eps_t``,
    ``delta_t = kappa_delta eps_t``."""

    eps0: float = 1.0
    beta: float = 2.0
    kappa_gamma: float = 1.0
    kappa_delta: float = 1.0
    stages: int = 5

    def __post_init__(self):
        if not (self.eps0 > 0 and self.beta > 1 and self.kappa_gamma > 0
                and self.kappa_delta > 0 and self.stages >= 1):
            raise ValueError("invalid continuation schedule")

    def eps(self, t: int) -> float:
        return self.eps0 / self.beta ** t

    def gamma(self, t: int) -> float:
        return self.kappa_gamma * self.eps(t)

    def delta(self, t: int) -> float:
        return self.kappa_delta * self.eps(t)

    def budget(self, t: int, dataset: Dataset, partition: Partition, sigma_c: float) -> int:
        """A priori iteration budget of stage ``t >= 1``.

        ``sigma_c (2 B*(gamma_{t-1}) + 2 delta_{t-1} / (alpha*_{t-1} ups))
        sqrt(2 / (kappa_gamma kappa_delta)) / eps_t``, where ``B*`` is the
        dual-norm bound at its optimal curvature ``alpha*``.
        """
        if t < 1:
            raise ValueError("stages are numbered from one")
        g_prev, d_prev = self.gamma(t - 1), self.delta(t - 1)
        ups = upsilon(dataset, partition)
        a = alpha_star(g_prev, dataset, partition)
        b_star = b_theta(g_prev, a, dataset, ups)
        val = sigma_c * (2 * b_star + 2 * d_prev / (a * ups)) \
            * math.sqrt(2.0 / (self.kappa_gamma * self.kappa_delta)) / self.eps(t)
        return int(min(math.ceil(val), 2 ** 62))


def continuation_solve(dataset: Dataset, schedule: ContinuationSchedule,
                       K: int | Partition = 2, *, stop: StopRule | None = None,
                       step_mode: str = "adaptive", growth: float = 2.0,
                       workers: int | None = None, y_star: np.ndarray | None = None):
    """Warm-started sequence of P-APG runs with decreasing ``(gamma_t, delta_t)``.

    Stage ``t`` starts from the multipliers of stage ``t - 1`` and stops when
    the certified dual suboptimality is at most ``delta_t`` or the a priori
    budget (capped by ``stop.iter_cap``) is spent; the latter is flagged.

    Returns
    -------
    eta : PrimalPoint
        Minimizer of the last stage's Lagrangian at its final multipliers.
    report : SolveReport
        ``extras["stages"]`` lists per-stage records with ``gamma``,
        ``delta``, ``budget``, ``iterations``, ``certified``, ``certificate``
        and, when ``y_star`` is given, ``error = ||y^(t) - y*||``.
    """
    stop = stop or StopRule()
    part = K if isinstance(K, Partition) else Partition(dataset.N, K)
    op = ConstraintOperator(dataset.points, part)
    clock = Clock()
    sigma_c = sigma_max(operator_map(op, "C"))
    report = SolveReport("papg-continuation", preprocess_s=clock.elapsed())
    report.extras["stages"] = []
    theta = np.zeros(op.m_cross)
    eta = None
    total = 0
    any_capped = False
    for t in range(1, schedule.stages + 1):
        g_t, d_t = schedule.gamma(t), schedule.delta(t)
        budget = schedule.budget(t, dataset, part, sigma_c)
        remaining = stop.time_cap_s - clock.elapsed()
        if remaining <= 0:
            report.status = "time_cap"
            break
        inner = StopRule(infeas_tol=0.0, gap_tol=0.0, iter_cap=min(budget, stop.iter_cap),
                         time_cap_s=remaining)
        m_block = part.block_size * (part.block_size - 1)
        tol_t = min(1e-6, 1e-2 * d_t / m_block)
        with SmoothedDual(dataset, part, g_t, workers=workers) as dual:
            _, theta, rep = papg_solve(
                dataset, g_t, part, theta0=theta, stop=inner, step_mode=step_mode,
                growth=growth, sigma_c=sigma_c, dual=dual, stage=t, delta_target=d_t,
                tolerance=lambda k, tol_t=tol_t: min(default_tolerance(k), tol_t))
            final = dual.evaluate(theta, tol_t)
        eta = final.eta
        for row in rep.rows:
            row["k"] = total + row["k"]
            report.rows.append(row)
        total += rep.iterations
        certs = rep.extras["certificates"]
        rec = {"stage": t, "gamma": g_t, "delta": d_t, "budget": budget,
               "iterations": rep.iterations, "certified": rep.status == "certified",
               "certificate": certs[-1] if certs else math.inf, "status": rep.status}
        if y_star is not None:
            rec["error"] = float(np.linalg.norm(eta.y - y_star))
        report.extras["stages"].append(rec)
        any_capped |= rep.status != "certified"
        if rep.status == "time_cap":
            report.status = "time_cap"
            break
    else:
        report.status = "budget" if any_capped else "converged"
    report.iterations = total
    report.walltime_s = clock.elapsed()
    report.extras["theta"] = theta
    return eta, report
