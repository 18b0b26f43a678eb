"""Continuation on an N=30 quadratic instance: per-stage error and work.

Usage::

    python3 demos/continuation_rate.py

Prints, for each stage, the regularization weight, the dual accuracy target,
the a priori budget, the inner iterations actually used, whether the stage
was certified, and ``||y^(t) - y*||`` against the oracle.
"""

import math

from convexreg.papg import ContinuationSchedule, continuation_solve
from convexreg.synth import gen_instance, oracle_solve


def main() -> None:
    ds, _ = gen_instance("quadratic", 2, 30, 0)
    y_star = oracle_solve(ds, 0.0).y
    beta = 2.0
    sched = ContinuationSchedule(eps0=1.0, beta=beta, kappa_gamma=1.0, kappa_delta=1.0, stages=5)
    _, rep = continuation_solve(ds, sched, 2, y_star=y_star)
    print(f"{'stage':>5} {'gamma':>10} {'delta':>10} {'budget':>12} {'iters':>7} "
          f"{'cert':>5} {'error':>10} {'ratio':>6}")
    prev = None
    for s in rep.extras["stages"]:
        ratio = "" if prev is None else f"{s['error'] / prev:6.3f}"
        print(f"{s['stage']:5d} {s['gamma']:10.3e} {s['delta']:10.3e} {s['budget']:12d} "
              f"{s['iterations']:7d} {str(s['certified']):>5} {s['error']:10.3e} {ratio:>6}")
        prev = s["error"]
    print(f"ratio limit 1/sqrt(beta) + 0.1 = {1 / math.sqrt(beta) + 0.1:.3f}; "
          f"total inner iterations {rep.iterations}")


if __name__ == "__main__":
    main()
