"""Stopping rules, per-iteration metrics and solve reports shared by all solvers."""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field

import numpy as np

#: Column order of the P-APG and ADMM metrics CSV.
DUAL_COLUMNS = ("k", "g_value", "gap_norm", "infeas_norm", "step", "stage", "wall_ms")
BOUND_COLUMNS = ("b_theta", "alpha_star", "L_gamma", "subopt_bound", "infeas_bound")
#: Column order of the active-set metrics CSV.
ASM_COLUMNS = ("k", "objective", "m_k", "t_step", "wall_ms")


@dataclass
class StopRule:
    """Termination thresholds.

    Two regimes are supported.  In the gap regime (default) a run stops once
    the normalized infeasibility is at most ``infeas_tol`` and the normalized
    absolute duality gap is at most ``gap_tol``.  In the accuracy regime
    (``y_star`` given) it stops once the infeasibility test holds and
    ``||y - y*|| / sqrt(N) <= accuracy_tol``.
    """

    infeas_tol: float = 1e-1
    gap_tol: float = 5e-7
    iter_cap: int = 10_000
    time_cap_s: float = math.inf
    accuracy_tol: float = 5e-3
    y_star: np.ndarray | None = None

    def __post_init__(self):
        if self.infeas_tol < 0 or self.gap_tol < 0 or self.accuracy_tol < 0:
            raise ValueError("tolerances must be nonnegative")
        if self.iter_cap < 0:
            raise ValueError("iter_cap must be nonnegative")
        if not self.time_cap_s > 0:
            raise ValueError("time_cap_s must be positive")

    @property
    def regime(self) -> str:
        return "gap" if self.y_star is None else "accuracy"

    def met(self, infeas: float, gap: float, acc: float | None = None) -> bool:
        if infeas > self.infeas_tol:
            return False
        if self.y_star is None:
            return abs(gap) <= self.gap_tol
        return acc is not None and acc <= self.accuracy_tol

    def excess(self, infeas: float, gap: float, acc: float | None = None) -> float:
        """Largest threshold ratio; at most one when the rule is met."""
        if self.y_star is None:
            second = _ratio(abs(gap), self.gap_tol)
        else:
            second = _ratio(acc, self.accuracy_tol) if acc is not None else math.inf
        return max(_ratio(infeas, self.infeas_tol), second)


def _ratio(value: float, tol: float) -> float:
    if tol > 0:
        return float(value) / tol
    return 0.0 if value == 0 else math.inf


class Clock:
    """Wall-clock helper measuring from construction."""

    def __init__(self):
        self.t0 = time.perf_counter()

    def elapsed(self) -> float:
        return time.perf_counter() - self.t0

    def ms(self) -> float:
        return 1e3 * self.elapsed()


@dataclass
class SolveReport:
    """Outcome of one solver run.

    Attributes
    ----------
    method : str
    status : str
        ``"converged"``, ``"iter_cap"``, ``"time_cap"``, ``"diverged"`` or
        ``"stalled"``.
    iterations : int
    walltime_s, preprocess_s : float
    rows : list of dict
        Per-iteration metrics keyed by ``columns``.
    columns : tuple of str
    extras : dict
        Method-specific diagnostics (margins, stage records, bounds).
    """

    method: str
    status: str = "running"
    iterations: int = 0
    walltime_s: float = 0.0
    preprocess_s: float = 0.0
    rows: list = field(default_factory=list)
    columns: tuple = DUAL_COLUMNS
    extras: dict = field(default_factory=dict)

    @property
    def converged(self) -> bool:
        return self.status == "converged"

    @property
    def capped(self) -> bool:
        return self.status in ("iter_cap", "time_cap")

    def add(self, **row) -> None:
        self.rows.append({c: row.get(c, "") for c in self.columns})

    def metrics_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=list(self.columns), lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: (format(v, ".17g") if isinstance(v, float) else v) for k, v in r.items()})
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
        return text
