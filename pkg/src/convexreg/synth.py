"""Synthetic benchmark instances and an independent dense reference solver.

Instances follow a fixed recipe: Gaussian locations (variance 4), a convex
test function (a quadratic ``0.5 x^T Q x`` with condition number 15 or an
exponential ``exp(p^T x)``), Gaussian noise (variance 100), and 30% of the
observations scaled by 1.3 to push them into the epigraph.

The reference solver (:func:`oracle_solve`) materializes every constraint row
as a sparse matrix and shares no code with the structured solvers beyond
the dataset container.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import nnls

from .model import Dataset, PrimalPoint, dumps17

KINDS = ("quadratic", "exponential")
COND = 15.0
LOCATION_STD = 2.0
NOISE_STD = 10.0
PERTURB_FRACTION = 0.3
PERTURB_SCALE = 1.3


@dataclass
class GroundTruth:
    """The test function behind an instance."""

    kind: str
    seed: int
    Q: np.ndarray | None = None
    p: np.ndarray | None = None
    perturbed_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def __call__(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.kind == "quadratic":
            return 0.5 * np.einsum("li,ij,lj->l", x, self.Q, x)
        return np.exp(x @ self.p)

    @property
    def cond(self) -> float | None:
        if self.Q is None:
            return None
        return float(np.linalg.cond(self.Q))

    def sidecar(self, n: int, N: int) -> dict:
        return {"kind": self.kind, "n": n, "N": N, "seed": int(self.seed),
                "cond": self.cond,
                "perturbed_indices": [int(i) for i in self.perturbed_indices]}


def _streams(seed: int):
    """Independent generators for locations, noise, perturbation and the test function."""
    ss = np.random.SeedSequence(seed)
    return [np.random.Generator(np.random.PCG64(s)) for s in ss.spawn(4)]


def condition_transform(M: np.ndarray, cond: float = COND) -> np.ndarray:
    """Affinely map the singular values of ``M`` onto ``[s_max/cond, s_max]``.

    Singular vectors are kept.  A single singular value cannot take two
    values, so for a ``1 x 1`` matrix the input is returned unchanged.
    """
    U, s, Vt = np.linalg.svd(M)
    smax, smin = s[0], s[-1]
    if len(s) == 1 or smax == smin:
        return M.copy()
    t = (s - smin) / (smax - smin)
    s_new = smax / cond + t * (smax - smax / cond)
    out = (U * s_new) @ Vt
    return 0.5 * (out + out.T)


def gen_instance(kind: str, n: int, N: int, seed: int) -> tuple[Dataset, GroundTruth]:
    """Draw one benchmark instance.

    Parameters
    ----------
    kind : {"quadratic", "exponential"}
    n, N : int
        Dimension and number of observations; ``N >= n + 1``.
    seed : int
        Root seed; the same seed always gives the same bytes.
    """
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}")
    if n < 1 or N < n + 1:
        raise ValueError(f"need n >= 1 and N >= n + 1 (got n={n}, N={N})")
    loc_rng, noise_rng, pert_rng, fn_rng = _streams(seed)
    X = loc_rng.normal(0.0, LOCATION_STD, size=(N, n))
    if kind == "quadratic":
        Lam = fn_rng.standard_normal((n, n))
        truth = GroundTruth(kind, seed, Q=condition_transform(Lam.T @ Lam))
    else:
        truth = GroundTruth(kind, seed, p=fn_rng.uniform(0.0, 0.2, size=n))
    y = truth(X) + noise_rng.normal(0.0, NOISE_STD, size=N)
    idx = np.sort(pert_rng.choice(N, size=int(np.floor(PERTURB_FRACTION * N)), replace=False))
    y[idx] *= PERTURB_SCALE
    truth.perturbed_indices = idx
    return Dataset(X, y), truth


def write_instance(dataset: Dataset, truth: GroundTruth, csv_path) -> Path:
    """Write the CSV and the ``.json`` sidecar next to it; returns the sidecar path."""
    csv_path = Path(csv_path)
    dataset.to_csv(csv_path)
    side = csv_path.with_suffix(".json")
    side.write_text(dumps17(truth.sidecar(dataset.n, dataset.N)))
    return side


# ----------------------------------------------------------------------------
# dense reference solver
# ----------------------------------------------------------------------------


class OracleCapError(ValueError):
    """Raised when an instance is too large for the dense reference solver."""


DEFAULT_CAP = 60


@dataclass
class OracleSolution:
    y: np.ndarray
    xi: np.ndarray
    objective: float
    theta: np.ndarray
    tight: np.ndarray
    gamma: float
    kkt_residual: float
    xi_least_norm: bool = False

    @property
    def point(self) -> PrimalPoint:
        return PrimalPoint(self.y, self.xi)

    @property
    def xi_norm(self) -> float:
        return float(np.linalg.norm(self.xi))


def constraint_matrix(points: np.ndarray) -> sp.csr_matrix:
    """Explicit sparse matrix of all rows, one row per ordered pair."""
    X = np.asarray(points, dtype=float)
    N, n = X.shape
    rows, cols, vals = [], [], []
    r = 0
    for l1 in range(N):
        for l2 in range(N):
            if l1 == l2:
                continue
            rows += [r, r]
            cols += [l2, l1]
            vals += [1.0, -1.0]
            diff = X[l1] - X[l2]
            rows += [r] * n
            cols += list(range(N + l1 * n, N + (l1 + 1) * n))
            vals += list(diff)
            r += 1
    return sp.csr_matrix((vals, (rows, cols)), shape=(N * (N - 1), N * (n + 1)))


def _mehrotra(P_diag, q, A, tol=1e-12, max_iter=200, b=None, x0=None):
    """Mehrotra predictor-corrector for ``min 0.5 x^T P x + q^T x, A x >= b``.

    ``P`` is diagonal and nonnegative; when it has zeros a tiny proximal term
    keeps the normal matrix definite, and the outer solver handles the rest.
    Returns ``(x, z, s)`` with multipliers ``z`` and slacks ``s``.
    """
    m, nv = A.shape
    if b is None:
        b = np.zeros(m)
    AT = A.T.tocsr()
    x = np.zeros(nv) if x0 is None else np.array(x0, dtype=float)
    s = np.maximum(A @ x - b, 1.0)
    z = np.ones(m)
    scale = 1.0 + np.linalg.norm(q)
    reg = np.where(P_diag > 0, 0.0, 1e-10)
    for _ in range(max_iter):
        rd = P_diag * x + q - AT @ z
        rp = A @ x - s - b
        mu = s @ z / m
        if mu < tol * scale and np.linalg.norm(rd) < tol * scale and np.linalg.norm(rp) < tol * scale:
            break
        Dg = z / s
        H = (AT @ sp.diags(Dg) @ A).toarray()
        H[np.diag_indices(nv)] += P_diag + reg
        try:
            F = cho_factor(H)
        except np.linalg.LinAlgError:
            # the normal matrix is exhausted; the polish step takes over
            break

        def newton(rc):
            # rc: target for s*z' complementarity residual
            rhs = -rd + AT @ (Dg * (-rp) + rc / s)
            dx = cho_solve(F, rhs)
            ds = A @ dx + rp
            dz = (rc - z * ds) / s
            return dx, ds, dz

        dx, ds, dz = newton(-s * z)
        a_aff = min(_step(s, ds), _step(z, dz))
        mu_aff = (s + a_aff * ds) @ (z + a_aff * dz) / m
        sigma = (mu_aff / mu) ** 3
        dx, ds, dz = newton(-s * z - ds * dz + sigma * mu)
        a = 0.99 * min(_step(s, ds, 1.0), _step(z, dz, 1.0))
        a = min(a, 1.0)
        x += a * dx
        s = np.maximum(s + a * ds, 1e-300)
        z = np.maximum(z + a * dz, 1e-300)
        if a < 1e-14:
            break
    return x, z, s


def _step(v, dv, cap=1.0):
    neg = dv < 0
    if not np.any(neg):
        return cap
    return min(cap, float(np.min(-v[neg] / dv[neg])))


def _refine_strictly_convex(P_diag, q, A, s, max_rounds=10):
    """Exact solution on a candidate active set via the dual NNLS problem.

    With ``P`` positive definite the dual of ``min 0.5 x^T P x + q^T x,
    A x >= 0`` is ``min_{z >= 0} ||P^{-1/2}(A^T z - q)||``, a nonnegative
    least-squares problem solved by a finite active-set method.  Only
    columns of rows with small interior-point slack are used; rows the
    recovered ``x`` violates are added and the solve repeated.
    """
    m = A.shape[0]
    sq = np.sqrt(P_diag)
    cand = np.flatnonzero(s <= 1e-3 * (1.0 + np.median(s)))
    AT = A.T.tocsc()
    tol_v = 1e-10 * (1.0 + np.linalg.norm(q))
    for _ in range(max_rounds):
        B = AT[:, cand].toarray() / sq[:, None]
        zc, _ = nnls(B, q / sq, maxiter=50 * max(1, cand.size))
        z = np.zeros(m)
        z[cand] = zc
        x = (AT @ z - q) / P_diag
        ax = A @ x
        bad = np.setdiff1d(np.flatnonzero(ax < -tol_v), cand)
        if bad.size == 0:
            return x, z
        cand = np.union1d(cand, bad)
    return None


def _project_active(P_diag, q, A, x, z):
    """Re-solve on the rows that are tight at ``x`` so they hold to round-off."""
    ax = A @ x
    act = np.flatnonzero((z > 0) | (np.abs(ax) <= 1e-9 * (1.0 + np.abs(x).max())))
    if act.size == 0:
        return x
    Aa = A[act].toarray()
    nv = x.size
    K = np.block([[np.diag(P_diag), -Aa.T], [Aa, np.zeros((act.size, act.size))]])
    sol, *_ = np.linalg.lstsq(K, np.concatenate([-q, np.zeros(act.size)]), rcond=None)
    xn = sol[:nv]
    if np.min(A @ xn) >= min(0.0, np.min(ax)) and np.linalg.norm(xn - x) <= 1e-6 * (1 + np.linalg.norm(x)):
        return xn
    return x


def _interpolating_subgradients(dataset: Dataset, A) -> np.ndarray | None:
    """Subgradients making ``y = ybar`` feasible, or ``None`` if there are none.

    Used when the unregularized optimum is numerically zero: the interior
    point converges slowly on such fully degenerate problems, while the data
    themselves are then an exact solution.
    """
    xi = least_norm_subgradients(dataset, dataset.values, np.zeros((dataset.N, dataset.n)),
                                 relax=0.0)
    x = np.concatenate([dataset.values, xi.ravel()])
    if np.min(A @ x) >= -1e-12 * (1.0 + np.abs(dataset.values).max()):
        return xi
    return None


def _snap_tight(dataset: Dataset, y: np.ndarray, xi: np.ndarray,
                rel: float = 1e-9) -> np.ndarray:
    """Move each ``xi_l`` minimally so its nearly tight rows hold with equality.

    The relaxation in the least-norm stage leaves tight rows off by round-off
    sized amounts; with ``y`` fixed the correction is a small least-squares
    problem per observation.
    """
    X = dataset.points
    thresh = rel * max(1.0, float(np.abs(y).max()))
    out = xi.copy()
    for l in range(X.shape[0]):
        D = X[l] - X                                  # rows x_l - x_k
        gap = y - y[l] + D @ xi[l]                    # row (l, k) values
        gap[l] = np.inf
        rows = np.flatnonzero(np.abs(gap) <= thresh)
        if rows.size == 0:
            continue
        corr, *_ = np.linalg.lstsq(D[rows], -gap[rows], rcond=None)
        out[l] = xi[l] + corr
    return out


def _polish_multipliers(P_diag, q, A, x, z):
    """Multipliers supported on the rows tight at ``x``, refit by NNLS.

    The interior-point multipliers of inactive rows are small but nonzero;
    refitting stationarity (all blocks) on the tight rows removes them.  The
    refit is kept only when its stationarity residual is no larger.
    """
    ax = A @ x
    tight = np.flatnonzero(ax <= 1e-9 * (1.0 + np.abs(x).max()))
    target = P_diag * x + q
    before = np.linalg.norm(target - A.T @ z, np.inf)
    if tight.size == 0:
        return z if before > np.linalg.norm(target, np.inf) else np.zeros_like(z)
    B = A[tight].T.toarray()
    zt, _ = nnls(B, target, maxiter=50 * tight.size)
    out = np.zeros_like(z)
    out[tight] = zt
    after = np.linalg.norm(target - A.T @ out, np.inf)
    return out if after <= before else z


def oracle_solve(dataset: Dataset, gamma: float, cap: int = DEFAULT_CAP,
                 tol: float | None = None, least_norm: bool = True) -> OracleSolution:
    """Dense reference solution of the (regularized) shape-constrained problem.

    A predictor-corrector interior-point method on the explicit constraint
    matrix locates the solution; for ``gamma > 0`` it is then refined to
    machine precision through the dual nonnegative least-squares problem.
    For ``gamma = 0`` the subgradients are not unique and a second stage
    selects the minimum-norm ones.

    Parameters
    ----------
    dataset : Dataset
    gamma : float
        Subgradient weight; ``0`` solves the unregularized problem.
    cap : int
        Largest ``N`` accepted.
    least_norm : bool
        For ``gamma = 0`` also select the minimum-norm subgradients.
    """
    N, n = dataset.N, dataset.n
    if N > cap:
        raise OracleCapError(f"N={N} exceeds oracle cap {cap}")
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    A = constraint_matrix(dataset.points)
    P_diag = np.concatenate([np.ones(N), np.full(N * n, float(gamma))])
    q = np.concatenate([-dataset.values, np.zeros(N * n)])
    if tol is None:
        # the unregularized path has no refinement stage, so it runs longer
        tol = 1e-10 if gamma > 0 else 1e-12
    x, z, s = _mehrotra(P_diag, q, A, tol=tol)
    if gamma > 0:
        ref = _refine_strictly_convex(P_diag, q, A, s)
        if ref is not None:
            x, z = ref
            x = _project_active(P_diag, q, A, x, z)
    y, xi = x[:N], x[N:].reshape(N, n)
    ln = False
    if gamma == 0 and 0.5 * np.sum((y - dataset.values) ** 2) <= 1e-8 * (1.0 + float(q @ q)):
        exact = _interpolating_subgradients(dataset, A)
        if exact is not None:
            y, xi = dataset.values.copy(), exact
            z = np.zeros_like(z)
    if gamma == 0 and least_norm:
        xi = least_norm_subgradients(dataset, y, xi)
        xi = _snap_tight(dataset, y, xi)
        ln = True
    x = np.concatenate([y, xi.ravel()])
    if gamma == 0:
        z = _polish_multipliers(P_diag, q, A, x, z)
    kkt = _kkt_residual(P_diag, q, A, x, z, gamma)
    obj = float(0.5 * np.sum((y - dataset.values) ** 2) + 0.5 * gamma * np.sum(xi ** 2))
    tight = np.flatnonzero(A @ x <= 1e-9 * max(1.0, np.abs(y).max()))
    return OracleSolution(y, xi, obj, z, tight, float(gamma), kkt, ln)


def _kkt_residual(P_diag, q, A, x, z, gamma):
    """Largest KKT violation relative to ``max(1, ||ybar||)``.

    For ``gamma = 0`` only the value block of the stationarity condition is
    measured, since the reported subgradients are re-selected afterwards.
    """
    scale = max(1.0, np.linalg.norm(q))
    g = P_diag * x + q - A.T @ z
    if gamma == 0:
        g = g[: np.count_nonzero(P_diag)]
    ax = A @ x
    feas = max(0.0, -float(np.min(ax)))
    comp = float(np.max(np.abs(z * ax))) if z.size else 0.0
    return float(max(np.linalg.norm(g, np.inf), feas, comp) / scale)


def least_norm_subgradients(dataset: Dataset, y: np.ndarray, xi0: np.ndarray,
                            relax: float = 1e-10) -> np.ndarray:
    """Minimum-norm subgradients consistent with optimal values ``y``.

    With ``y`` fixed the rows decouple per observation ``l``:
    ``min ||xi_l||^2`` subject to ``xi_l.(x_l - x_k) >= y_l - y_k`` for all
    ``k``.  ``relax`` loosens each row slightly to absorb round-off in ``y``.
    """
    X = dataset.points
    N, n = X.shape
    out = np.empty((N, n))
    for l in range(N):
        D = np.delete(X[l] - X, l, axis=0)          # rows x_l - x_k
        rhs = np.delete(y[l] - y, l) - relax * (1.0 + np.abs(np.delete(y[l] - y, l)))
        A = sp.csr_matrix(D)
        xl, _, _ = _mehrotra(np.full(n, 2.0), np.zeros(n), A, b=rhs, tol=1e-13)
        out[l] = xl
    return out
