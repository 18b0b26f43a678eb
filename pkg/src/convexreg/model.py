"""Problem data, matrix-free shape-constraint operators and fit metrics.

Constraint rows are indexed by ordered pairs ``(l1, l2)`` with ``l1 != l2``,
sorted lexicographically.  Row ``(l1, l2)`` evaluates

    y[l2] - y[l1] + xi[l1] . (x[l1] - x[l2])

which is nonnegative for every pair exactly when ``(y, xi)`` are the values
and subgradients of a convex function at the sample points.

Internally every operator works on the ``N x N`` "pair matrix" ``Z`` with
``Z[l1, l2]`` the value of row ``(l1, l2)``; the row-major off-diagonal
entries of ``Z`` are the constraint vector in lexicographic order.
"""

from __future__ import annotations

import csv
import io
import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class DimensionError(ValueError):
    """Raised when an input vector does not match the problem dimensions."""


class DegenerateGeometryError(ValueError):
    """Raised when a bound needs a positive cross-block distance but it is 0."""


# ----------------------------------------------------------------------------
# data containers
# ----------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Dataset:
    """N observations ``(x_l, y_l)`` in ``R^n x R``.

    Parameters
    ----------
    points : ndarray, shape (N, n)
        Locations, one per row.
    values : ndarray, shape (N,)
        Observations.
    """

    points: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        X = np.array(self.points, dtype=float)
        y = np.array(self.values, dtype=float).ravel()
        if X.ndim == 1:
            X = X[:, None]
        if X.ndim != 2 or X.shape[0] != y.shape[0]:
            raise DimensionError(
                f"points {X.shape} and values {y.shape} do not describe one dataset")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise ValueError("dataset contains non-finite entries")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "points", X)
        object.__setattr__(self, "values", y)

    @property
    def N(self) -> int:
        return self.points.shape[0]

    @property
    def n(self) -> int:
        return self.points.shape[1]

    @property
    def B_x(self) -> float:
        """Largest Euclidean norm of a location."""
        return float(np.max(np.linalg.norm(self.points, axis=1)))

    @property
    def x_hat(self) -> np.ndarray:
        return self.points.mean(axis=0)

    @property
    def y_hat(self) -> float:
        return float(self.values.mean())

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.points[idx], self.values[idx])

    def reorder(self, perm) -> "Dataset":
        return self.subset(perm)

    def fingerprint(self) -> str:
        import hashlib

        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.points).tobytes())
        h.update(np.ascontiguousarray(self.values).tobytes())
        return h.hexdigest()

    # -- CSV ------------------------------------------------------------------

    def to_csv(self, path=None) -> str:
        """Write ``x1,...,xn,y`` CSV with 17 significant digits."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([f"x{k + 1}" for k in range(self.n)] + ["y"])
        for x, y in zip(self.points, self.values):
            w.writerow([_fmt(v) for v in x] + [_fmt(y)])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, path) -> "Dataset":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], [r for r in rows[1:] if r]
        if not header or header[-1].strip() != "y":
            raise ValueError(f"{path}: expected header x1,...,xn,y")
        n = len(header) - 1
        expected = [f"x{k + 1}" for k in range(n)]
        if [h.strip() for h in header[:-1]] != expected:
            raise ValueError(f"{path}: expected header {','.join(expected)},y")
        data = np.array([[float(v) for v in r] for r in body], dtype=float)
        return cls(data[:, :n], data[:, n])


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


@dataclass(frozen=True)
class Partition:
    """K contiguous blocks of equal size ``N_bar = N / K``."""

    N: int
    K: int

    def __post_init__(self):
        if self.K < 1 or self.N % self.K:
            raise ValueError(f"N={self.N} is not divisible into K={self.K} equal blocks")

    @property
    def block_size(self) -> int:
        return self.N // self.K

    def block(self, i: int) -> slice:
        nb = self.block_size
        return slice(i * nb, (i + 1) * nb)

    def labels(self) -> np.ndarray:
        return np.repeat(np.arange(self.K), self.block_size)

    def block_pairs(self):
        """Ordered block pairs ``(i, j)``, ``i != j``, lexicographic."""
        return [(i, j) for i in range(self.K) for j in range(self.K) if i != j]

    @property
    def n_cross(self) -> int:
        return self.block_size ** 2 * self.K * (self.K - 1)

    def check(self, n: int) -> None:
        if self.block_size <= n + 1:
            raise ValueError(
                f"block size {self.block_size} must exceed n+1={n + 1}")


def colocate_duplicates(dataset: Dataset, K: int) -> np.ndarray:
    """Permutation placing repeated locations in a common block when possible.

    Groups of identical locations are packed greedily (largest first) into
    ``K`` blocks of size ``N/K``.  Groups larger than a block are split, in
    which case the cross-block distance stays zero and the caller will see it
    through :func:`upsilon`.
    """
    part = Partition(dataset.N, K)
    _, inverse = np.unique(dataset.points, axis=0, return_inverse=True)
    inverse = inverse.ravel()
    groups = [np.flatnonzero(inverse == g) for g in range(inverse.max() + 1)]
    groups.sort(key=len, reverse=True)
    room = [part.block_size] * K
    blocks: list[list[int]] = [[] for _ in range(K)]
    for g in groups:
        members = list(g)
        while members:
            b = int(np.argmax(room))
            take = members[: room[b]]
            members = members[room[b]:]
            blocks[b].extend(take)
            room[b] -= len(take)
    return np.array([i for b in blocks for i in sorted(b)], dtype=int)


# ----------------------------------------------------------------------------
# primal point helpers
# ----------------------------------------------------------------------------


@dataclass
class PrimalPoint:
    """Fitted values ``y`` (N,) and subgradients ``xi`` (N, n)."""

    y: np.ndarray
    xi: np.ndarray

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float).ravel()
        xi = np.asarray(self.xi, dtype=float)
        self.xi = xi.reshape(self.y.shape[0], -1)

    @property
    def eta(self) -> np.ndarray:
        """Stacked vector ``[y; xi_1; ...; xi_N]``."""
        return np.concatenate([self.y, self.xi.ravel()])

    @classmethod
    def from_eta(cls, eta, N: int) -> "PrimalPoint":
        eta = np.asarray(eta, dtype=float)
        return cls(eta[:N], eta[N:].reshape(N, -1))

    def copy(self) -> "PrimalPoint":
        return PrimalPoint(self.y.copy(), self.xi.copy())

    def to_json(self, path=None) -> str:
        N, n = self.xi.shape
        doc = {"n": n, "N": N, "y": [float(v) for v in self.y],
               "xi": [[float(v) for v in row] for row in self.xi]}
        text = _dumps17(doc)
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_json(cls, path) -> "PrimalPoint":
        doc = json.loads(Path(path).read_text())
        y = np.array(doc["y"], dtype=float)
        xi = np.array(doc["xi"], dtype=float).reshape(doc["N"], doc["n"])
        if y.shape[0] != doc["N"]:
            raise DimensionError("model JSON: len(y) != N")
        return cls(y, xi)


def _dumps17(obj) -> str:
    """JSON with floats written at 17 significant digits."""
    def enc(o):
        if isinstance(o, float):
            if not np.isfinite(o):
                return "null"
            return _fmt(o)
        if isinstance(o, dict):
            return "{" + ", ".join(f"{json.dumps(str(k))}: {enc(v)}" for k, v in o.items()) + "}"
        if isinstance(o, (list, tuple)):
            return "[" + ", ".join(enc(v) for v in o) + "]"
        if isinstance(o, (np.floating,)):
            return enc(float(o))
        if isinstance(o, (np.integer,)):
            return str(int(o))
        return json.dumps(o)
    return enc(obj) + "\n"


dumps17 = _dumps17


# ----------------------------------------------------------------------------
# row indexing
# ----------------------------------------------------------------------------


def row_index(l1: int, l2: int, N: int) -> int:
    """Position of pair ``(l1, l2)`` among the ``N(N-1)`` sorted rows."""
    if l1 == l2 or not (0 <= l1 < N and 0 <= l2 < N):
        raise ValueError(f"invalid pair ({l1}, {l2}) for N={N}")
    return l1 * (N - 1) + l2 - (l2 > l1)


def row_pair(r: int, N: int) -> tuple[int, int]:
    """Inverse of :func:`row_index`."""
    l1, rem = divmod(int(r), N - 1)
    return l1, rem + (rem >= l1)


def _offdiag_mask(N: int) -> np.ndarray:
    return ~np.eye(N, dtype=bool)


# ----------------------------------------------------------------------------
# pair-matrix kernels (shared by all solvers)
# ----------------------------------------------------------------------------


def pair_values(X: np.ndarray, y: np.ndarray, xi: np.ndarray) -> np.ndarray:
    """``Z[l1, l2] = y[l2] - y[l1] + xi[l1].(x[l1] - x[l2])``; zero diagonal."""
    P = xi @ X.T
    Z = (y[None, :] - y[:, None]) + (np.diag(P)[:, None] - P)
    np.fill_diagonal(Z, 0.0)
    return Z


def pair_adjoint(X: np.ndarray, W: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Adjoint of :func:`pair_values`: weights ``W`` -> ``(gy, gxi)``.

    The diagonal of ``W`` is ignored.
    """
    W = W.copy()
    np.fill_diagonal(W, 0.0)
    r = W.sum(axis=1)
    gy = W.sum(axis=0) - r
    gxi = r[:, None] * X - W @ X
    return gy, gxi


class ConstraintOperator:
    """Matrix-free actions of ``A1``, ``A2``, ``A = [A1 A2]`` and ``C``.

    Only the locations are stored; ``C`` (the cross-block rows) is available
    when a :class:`Partition` is given.
    """

    def __init__(self, points, partition: Partition | None = None):
        X = np.asarray(points, dtype=float)
        self.X = X if X.ndim == 2 else X[:, None]
        self.partition = partition
        if partition is not None and partition.N != self.N:
            raise DimensionError("partition size does not match the number of points")

    @property
    def N(self) -> int:
        return self.X.shape[0]

    @property
    def n(self) -> int:
        return self.X.shape[1]

    @property
    def m(self) -> int:
        return self.N * (self.N - 1)

    @property
    def n_var(self) -> int:
        return self.N * (self.n + 1)

    # -- conversions between row vectors and pair matrices -------------------

    def to_pairs(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        if z.shape != (self.m,):
            raise DimensionError(f"expected vector of length {self.m}, got {z.shape}")
        W = np.zeros((self.N, self.N))
        W[_offdiag_mask(self.N)] = z
        return W

    def from_pairs(self, Z: np.ndarray) -> np.ndarray:
        return Z[_offdiag_mask(self.N)]

    def _check_y(self, y):
        y = np.asarray(y, dtype=float)
        if y.shape != (self.N,):
            raise DimensionError(f"expected y of length {self.N}, got {y.shape}")
        return y

    def _check_xi(self, xi):
        xi = np.asarray(xi, dtype=float)
        if xi.size != self.N * self.n:
            raise DimensionError(f"expected xi with {self.N * self.n} entries, got {xi.size}")
        return xi.reshape(self.N, self.n)

    # -- A1, A2 ---------------------------------------------------------------

    def A1(self, y) -> np.ndarray:
        y = self._check_y(y)
        return self.from_pairs(y[None, :] - y[:, None])

    def A1T(self, z) -> np.ndarray:
        W = self.to_pairs(z)
        return W.sum(axis=0) - W.sum(axis=1)

    def A2(self, xi) -> np.ndarray:
        xi = self._check_xi(xi)
        P = xi @ self.X.T
        return self.from_pairs(np.diag(P)[:, None] - P)

    def A2T(self, w) -> np.ndarray:
        W = self.to_pairs(w)
        return (W.sum(axis=1)[:, None] * self.X - W @ self.X).ravel()

    def pairs(self, eta: PrimalPoint | np.ndarray) -> np.ndarray:
        y, xi = self._split(eta)
        return pair_values(self.X, y, xi)

    def A(self, eta) -> np.ndarray:
        return self.from_pairs(self.pairs(eta))

    def AT(self, z) -> np.ndarray:
        gy, gxi = pair_adjoint(self.X, self.to_pairs(z))
        return np.concatenate([gy, gxi.ravel()])

    def _split(self, eta):
        if isinstance(eta, PrimalPoint):
            return self._check_y(eta.y), self._check_xi(eta.xi)
        eta = np.asarray(eta, dtype=float)
        if eta.shape != (self.n_var,):
            raise DimensionError(f"expected eta of length {self.n_var}, got {eta.shape}")
        return eta[: self.N], eta[self.N:].reshape(self.N, self.n)

    # -- C: cross-block rows --------------------------------------------------

    def _need_partition(self) -> Partition:
        if self.partition is None:
            raise ValueError("operator C needs a partition")
        return self.partition

    @property
    def m_cross(self) -> int:
        return self._need_partition().n_cross

    def cross_from_pairs(self, Z: np.ndarray) -> np.ndarray:
        """Extract ``[theta_ij]`` ordering from a pair matrix."""
        part = self._need_partition()
        K, nb = part.K, part.block_size
        if K == 1:
            return np.zeros(0)
        B = Z.reshape(K, nb, K, nb).transpose(0, 2, 1, 3)
        off = ~np.eye(K, dtype=bool)
        return B[off].ravel()

    def cross_to_pairs(self, theta: np.ndarray) -> np.ndarray:
        part = self._need_partition()
        K, nb = part.K, part.block_size
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (part.n_cross,):
            raise DimensionError(f"expected theta of length {part.n_cross}, got {theta.shape}")
        B = np.zeros((K, K, nb, nb))
        if K > 1:
            B[~np.eye(K, dtype=bool)] = theta.reshape(-1, nb, nb)
        return B.transpose(0, 2, 1, 3).reshape(self.N, self.N)

    def C(self, eta) -> np.ndarray:
        return self.cross_from_pairs(self.pairs(eta))

    def CT(self, theta) -> PrimalPoint:
        gy, gxi = pair_adjoint(self.X, self.cross_to_pairs(theta))
        return PrimalPoint(gy, gxi)

    def CT_vec(self, theta) -> np.ndarray:
        return self.CT(theta).eta

    apply_A1 = A1
    apply_A1_T = A1T
    apply_A2 = A2
    apply_A2_T = A2T
    apply_A = A
    apply_A_T = AT
    apply_C = C
    apply_C_T = CT

    # -- dense construction (small N only; tests and the oracle) -------------

    def dense(self):
        """Explicit ``(A1, A2)`` built row by row."""
        N, n = self.N, self.n
        A1 = np.zeros((self.m, N))
        A2 = np.zeros((self.m, N * n))
        r = 0
        for l1 in range(N):
            for l2 in range(N):
                if l1 == l2:
                    continue
                A1[r, l2] += 1.0
                A1[r, l1] -= 1.0
                A2[r, l1 * n:(l1 + 1) * n] = self.X[l1] - self.X[l2]
                r += 1
        return A1, A2


# ----------------------------------------------------------------------------
# metrics
# ----------------------------------------------------------------------------


def _as_yx(model, N: int | None = None):
    if isinstance(model, PrimalPoint):
        return model.y, model.xi
    if N is None:
        raise TypeError("pass a PrimalPoint or give N")
    p = PrimalPoint.from_eta(model, N)
    return p.y, p.xi


def infeasibility(dataset: Dataset, model: PrimalPoint) -> float:
    """Normalized violation ``||(A1 y + A2 xi)_-|| / sqrt(N^2 - N)``."""
    y, xi = _as_yx(model)
    Z = pair_values(dataset.points, y, xi)
    neg = np.minimum(Z, 0.0)
    N = dataset.N
    return float(np.linalg.norm(neg) / np.sqrt(N * N - N))


def duality_gap(op: ConstraintOperator, theta: np.ndarray, model: PrimalPoint) -> float:
    """``theta^T C eta / (N^2 - N)``; negative values signal infeasible eta."""
    N = op.N
    if theta.size == 0:
        return 0.0
    return float(theta @ op.C(model) / (N * N - N))


def objective(dataset: Dataset, model: PrimalPoint, gamma: float) -> float:
    """``0.5 ||y - ybar||^2 + 0.5 gamma ||xi||^2``."""
    y, xi = _as_yx(model)
    return float(0.5 * np.sum((y - dataset.values) ** 2) + 0.5 * gamma * np.sum(xi ** 2))


def accuracy(model: PrimalPoint, y_star: np.ndarray) -> float:
    """``||y - y*|| / sqrt(N)``."""
    y = model.y if isinstance(model, PrimalPoint) else np.asarray(model)
    return float(np.linalg.norm(y - y_star) / np.sqrt(y.shape[0]))


def upsilon(dataset: Dataset, partition: Partition | None = None) -> float:
    """Smallest squared distance between points of different blocks.

    Without a partition every pair counts.
    """
    X = dataset.points
    sq = np.sum(X ** 2, axis=1)
    D = sq[:, None] + sq[None, :] - 2.0 * X @ X.T
    D = np.maximum(D, 0.0)
    if partition is None or partition.K == 1:
        mask = _offdiag_mask(dataset.N)
    else:
        lab = partition.labels()
        mask = lab[:, None] != lab[None, :]
    # exact recomputation on the minimizing pair avoids cancellation error
    i, j = np.unravel_index(np.argmin(np.where(mask, D, np.inf)), D.shape)
    return float(np.sum((X[i] - X[j]) ** 2))


def slater_point(dataset: Dataset, alpha: float) -> PrimalPoint:
    """Strictly feasible point from the quadratic ``y_hat + alpha/2 ||x - x_hat||^2``.

    Every constraint row has slack ``alpha/2 ||x_l1 - x_l2||^2``.  A warning is
    issued when two locations coincide, since the slack of that pair is zero.
    """
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    d = dataset.points - dataset.x_hat
    y = dataset.y_hat + 0.5 * alpha * np.sum(d ** 2, axis=1)
    if dataset.N > 1 and upsilon(dataset) == 0.0:
        warnings.warn("repeated locations: Slater point is not strictly feasible",
                      RuntimeWarning, stacklevel=2)
    return PrimalPoint(y, alpha * d)


def max_affine_round(dataset: Dataset, model: PrimalPoint) -> PrimalPoint:
    """Feasible point from the max-affine extension of ``model``.

    ``y'_l = max_k y_k + xi_k.(x_l - x_k)`` and ``xi'_l`` is the slope of the
    maximizing piece; the result satisfies every shape constraint.
    """
    X = dataset.points
    V = model.y[None, :] + (X @ model.xi.T) - np.sum(model.xi * X, axis=1)[None, :]
    k = np.argmax(V, axis=1)
    return PrimalPoint(V[np.arange(dataset.N), k], model.xi[k])


def predict(model: PrimalPoint, dataset: Dataset, x) -> np.ndarray | float:
    """Evaluate ``max_l y_l + xi_l.(x - x_l)`` at one or many points."""
    x = np.asarray(x, dtype=float)
    if model.y.shape[0] != dataset.N or model.xi.shape[1] != dataset.n:
        raise DimensionError("model does not match dataset")
    single = x.ndim == 1
    if single and dataset.n == 1 and x.shape[0] != 1:
        x = x[:, None]
        single = False
    Xq = np.atleast_2d(x)
    if Xq.shape[1] != dataset.n:
        raise DimensionError(f"query points must have dimension {dataset.n}")
    offs = model.y - np.sum(model.xi * dataset.points, axis=1)
    vals = np.max(Xq @ model.xi.T + offs[None, :], axis=1)
    return float(vals[0]) if single else vals
