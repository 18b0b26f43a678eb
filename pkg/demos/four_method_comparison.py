"""Run the four solvers on one toy instance and print the comparison table.

Usage::

    python3 demos/four_method_comparison.py [workdir]

Generates a quadratic instance with n=2, N=20, computes its oracle, solves it
with ASM, ADMM, IPM and adaptive P-APG in the accuracy regime, and prints the
``compare`` table.  Everything goes through the command-line entry point.
"""

import sys
import tempfile
from pathlib import Path

from convexreg.cli import main


def run(workdir: Path) -> int:
    inst = workdir / "toy.csv"
    orc = workdir / "toy_oracle.json"
    main(["generate", "--kind", "quadratic", "--n", "2", "--N", "20", "--seed", "2",
          "--out", str(inst)])
    main(["oracle", "--instance", str(inst), "--out", str(orc)])
    runs = []
    for method in ("asm", "admm", "ipm", "papg-a"):
        out = workdir / method
        main(["solve", "--method", method, "--instance", str(inst), "--oracle", str(orc),
              "--stop", "accuracy", "--iter-cap", "1000000", "--out", str(out)])
        runs.append(str(out))
    print("\ncomparison")
    return main(["compare", *runs, "--csv", str(workdir / "comparison.csv")])


if __name__ == "__main__":
    if len(sys.argv) > 1:
        target = Path(sys.argv[1])
        target.mkdir(parents=True, exist_ok=True)
        sys.exit(run(target))
    with tempfile.TemporaryDirectory() as tmp:
        sys.exit(run(Path(tmp)))
