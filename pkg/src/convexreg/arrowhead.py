"""Block-arrowhead normal-equation matrices and their direct solves.

For the shape-constrained QP the interior-point normal matrix
``G + A^T diag(d) A`` with ``G = diag(I_N, gamma I_{Nn})`` has a dense
``N x N`` leading block (the fitted values), ``N`` border blocks of size
``N x n`` and a block-diagonal tail of ``n x n`` blocks (one per
subgradient).  Ordering the unknowns as ``[y; xi_1; ...; xi_N]`` the matrix is

    [[M00,    M01, ..., M0N],
     [M01^T,  M11,           ],
     [ ...           ...     ],
     [M0N^T,            MNN]]
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, solve_triangular


class NumericalBreakdown(np.linalg.LinAlgError):
    """Factorization failed because the matrix lost positive definiteness."""

    def __init__(self, msg, tau: float | None = None):
        if tau is not None:
            msg = f"{msg} (barrier parameter {tau:.3e})"
        super().__init__(msg)
        self.tau = tau


@dataclass
class ArrowheadMatrix:
    """Blocks of a symmetric block-arrowhead matrix.

    Attributes
    ----------
    M00 : ndarray, shape (N, N)
    M0l : ndarray, shape (N, N, n)
        ``M0l[l]`` is the ``N x n`` border block coupling ``y`` and ``xi_l``.
    Mll : ndarray, shape (N, n, n)
        Diagonal tail blocks.
    """

    M00: np.ndarray
    M0l: np.ndarray
    Mll: np.ndarray

    @property
    def N(self) -> int:
        return self.M00.shape[0]

    @property
    def n(self) -> int:
        return self.Mll.shape[1]

    def to_dense(self) -> np.ndarray:
        N, n = self.N, self.n
        M = np.zeros((N * (n + 1), N * (n + 1)))
        M[:N, :N] = self.M00
        for l in range(N):
            sl = slice(N + l * n, N + (l + 1) * n)
            M[:N, sl] = self.M0l[l]
            M[sl, :N] = self.M0l[l].T
            M[sl, sl] = self.Mll[l]
        return M

    def matvec(self, v: np.ndarray) -> np.ndarray:
        N, n = self.N, self.n
        v0, vl = v[:N], v[N:].reshape(N, n)
        out0 = self.M00 @ v0 + np.einsum("lkj,lj->k", self.M0l, vl)
        outl = np.einsum("lkj,k->lj", self.M0l, v0) + np.einsum("lij,lj->li", self.Mll, vl)
        return np.concatenate([out0, outl.ravel()])


def assemble_arrowhead(points: np.ndarray, d, gamma: float, *,
                       check_positive: bool = True) -> ArrowheadMatrix:
    """Assemble ``G + A^T diag(d) A`` for the constraint rows on ``points``.

    Parameters
    ----------
    points : ndarray, shape (N, n)
    d : ndarray, shape (N(N-1),) or (N, N)
        Row weights in lexicographic row order, or as a pair matrix
        ``W[l1, l2]`` (diagonal ignored).
    gamma : float
        Weight of the subgradient block of ``G``.
    """
    X = np.asarray(points, dtype=float)
    N, n = X.shape
    d = np.asarray(d, dtype=float)
    if d.ndim == 1:
        if d.shape[0] != N * (N - 1):
            raise ValueError(f"expected {N * (N - 1)} weights, got {d.shape[0]}")
        W = np.zeros((N, N))
        W[~np.eye(N, dtype=bool)] = d
    else:
        W = d.copy()
        np.fill_diagonal(W, 0.0)
        d = W[~np.eye(N, dtype=bool)]
    if check_positive and np.any(d < 0):
        raise ValueError("row weights must be nonnegative")
    r = W.sum(axis=1)
    M00 = np.diag(1.0 + r + W.sum(axis=0)) - (W + W.T)
    # Delta[l, k] = x_l - x_k
    Delta = X[:, None, :] - X[None, :, :]
    WD = W[:, :, None] * Delta
    Mll = gamma * np.eye(n)[None] + np.einsum("lkj,lki->lij", WD, Delta)
    M0l = WD.copy()
    M0l[np.arange(N), np.arange(N)] = -WD.sum(axis=1)
    return ArrowheadMatrix(M00, M0l, Mll)


def _chol(M, tau=None, what="block"):
    try:
        return np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        scale = np.max(np.abs(np.diagonal(M, axis1=-2, axis2=-1)))
        shift = 1e-14 * max(scale, 1.0)
        eye = np.eye(M.shape[-1])
        try:
            return np.linalg.cholesky(M + shift * eye)
        except np.linalg.LinAlgError:
            raise NumericalBreakdown(f"Cholesky of {what} failed", tau) from None


@dataclass
class ArrowheadFactor:
    """Factorization used by :func:`solve_arrowhead`.

    ``Fll`` are Cholesky factors of the tail blocks, ``T[l] = Mll^{-1} M0l^T``
    and ``FS`` is the Cholesky factor of the Schur complement
    ``S = M00 - sum_l M0l Mll^{-1} M0l^T``.
    """

    M: ArrowheadMatrix
    Fll: np.ndarray
    T: np.ndarray
    FS: np.ndarray


def factor_arrowhead(M: ArrowheadMatrix, tau: float | None = None) -> ArrowheadFactor:
    Fll = _chol(M.Mll, tau, "tail block")
    # T[l] = Mll^{-1} M0l^T, shape (N, n, N)
    T = _batched_cho_solve(Fll, np.transpose(M.M0l, (0, 2, 1)))
    S = M.M00 - np.einsum("lkj,lji->ki", M.M0l, T)
    S = 0.5 * (S + S.T)
    FS = _chol(S, tau, "Schur complement")
    return ArrowheadFactor(M, Fll, T, FS)


def _batched_cho_solve(F: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Solve ``F F^T X = B`` for a stack of lower factors ``F``."""
    if F.shape[-1] == 1:
        return B / (F[..., :1, :1] ** 2)
    Z = np.linalg.solve(F, B)
    return np.linalg.solve(np.swapaxes(F, -1, -2), Z)


def solve_factored(Fa: ArrowheadFactor, b: np.ndarray) -> np.ndarray:
    M = Fa.M
    N, n = M.N, M.n
    b0, bl = b[:N], b[N:].reshape(N, n)
    # u_l = Mll^{-1} b_l
    u = _batched_cho_solve(Fa.Fll, bl[:, :, None])[:, :, 0]
    rhs = b0 - np.einsum("lkj,lj->k", M.M0l, u)
    dy = cho_solve((Fa.FS, True), rhs)
    dxi = u - np.einsum("ljk,k->lj", Fa.T, dy)
    return np.concatenate([dy, dxi.ravel()])


def solve_arrowhead(M: ArrowheadMatrix, b: np.ndarray, tau: float | None = None) -> np.ndarray:
    """Solve ``M v = b`` by eliminating the tail blocks.

    ``dy = S^{-1} (b0 - sum_l M0l Mll^{-1} b_l)`` with the Schur complement
    ``S``, then ``dxi_l = Mll^{-1} (b_l - M0l^T dy)``.

    Raises
    ------
    NumericalBreakdown
        If a block or the Schur complement is not numerically positive definite.
    """
    b = np.asarray(b, dtype=float)
    if b.shape != (M.N * (M.n + 1),):
        raise ValueError("right-hand side has the wrong length")
    return solve_factored(factor_arrowhead(M, tau), b)


def solve_arrowhead_permuted(M: ArrowheadMatrix, b: np.ndarray) -> np.ndarray:
    """Solve ``M v = b`` with one Cholesky factor of the tail-first permutation.

    Reordering to ``[xi_1; ...; xi_N; y]`` gives the lower factor

        [[F_1,            ],
         [      ...       ],
         [           F_N  ],
         [L_1 ... L_N, F_0]]

    with ``F_l = chol(Mll)``, ``L_l = M0l F_l^{-T}`` and
    ``F_0 = chol(M00 - sum_l L_l L_l^T)``; the solve is one forward and one
    backward substitution.
    """
    N, n = M.N, M.n
    b0, bl = b[:N], b[N:].reshape(N, n)
    F = _chol(M.Mll)
    # L_l = M0l F_l^{-T}: solve F_l L_l^T = M0l^T
    Lt = np.stack([solve_triangular(F[l], M.M0l[l].T, lower=True) for l in range(N)])
    S = M.M00 - np.einsum("ljk,lji->ki", Lt, Lt)
    F0 = _chol(0.5 * (S + S.T))
    # forward: F_l z_l = b_l ; F0 z0 = b0 - sum L_l z_l
    z = np.stack([solve_triangular(F[l], bl[l], lower=True) for l in range(N)])
    z0 = solve_triangular(F0, b0 - np.einsum("ljk,lj->k", Lt, z), lower=True)
    # backward: F0^T v0 = z0 ; F_l^T v_l = z_l - L_l^T v0
    v0 = solve_triangular(F0, z0, lower=True, trans="T")
    vl = np.stack([solve_triangular(F[l], z[l] - Lt[l] @ v0, lower=True, trans="T")
                   for l in range(N)])
    return np.concatenate([v0, vl.ravel()])


def random_spd_arrowhead(N: int, n: int, rng: np.random.Generator) -> ArrowheadMatrix:
    """Random well-posed SPD arrowhead matrix for testing."""
    M0l = rng.standard_normal((N, N, n))
    Mll = np.empty((N, n, n))
    for l in range(N):
        B = rng.standard_normal((n, n))
        Mll[l] = B @ B.T + n * np.eye(n)
    # make the Schur complement comfortably positive definite
    T = np.linalg.solve(Mll, np.transpose(M0l, (0, 2, 1)))
    coupling = np.einsum("lkj,lji->ki", M0l, T)
    B = rng.standard_normal((N, N))
    M00 = coupling + B @ B.T + N * np.eye(N)
    return ArrowheadMatrix(0.5 * (M00 + M00.T), M0l, Mll)
