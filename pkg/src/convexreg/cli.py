"""Command-line front end: ``generate``, ``solve``, ``compare`` and ``oracle``.

Exit codes are 0 when the run met its thresholds, 2 when an iteration or
time cap ended it, and 1 on error.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import traceback
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import (ConstraintOperator, Dataset, Partition, PrimalPoint, accuracy, dumps17,
                    infeasibility, objective)
from .reports import StopRule

METHODS = ("papg-a", "papg-c", "asm", "admm", "ipm", "oracle")
EXIT_OK, EXIT_ERROR, EXIT_CAP = 0, 1, 2
SUMMARY_FIELDS = ("walltime_s", "preprocess_s", "infeasibility", "dualgap", "subopt_reg",
                  "accuracy")

# key -> (parser, default); None defaults mean "not set"
_BOOL = lambda v: str(v).strip().lower() in ("1", "true", "yes", "on")  # noqa: E731
COMMON_KEYS = {
    "method": (str, None), "instance": (str, None), "out": (str, "run"),
    "gamma": (float, 1e-4), "seed": (int, 0), "oracle": (str, None),
    "stop": (str, "gap"), "infeas_tol": (float, 1e-1), "gap_tol": (float, 5e-7),
    "accuracy_tol": (float, 5e-3), "iter_cap": (int, None), "time_cap_s": (float, math.inf),
}
PAPG_KEYS = {
    "K": (int, 2), "step_mode": (str, None), "upsilon_step": (float, 2.0), "workers": (int, None),
    "continuation": (_BOOL, False), "eps0": (float, 1.0), "beta": (float, 2.0),
    "kappa_gamma": (float, 1.0), "kappa_delta": (float, 1.0), "stages": (int, 5),
}
METHOD_KEYS = {
    "papg-a": PAPG_KEYS,
    "papg-c": PAPG_KEYS,
    "asm": {"alpha": (float, None)},
    "admm": {"rho": (float, 1.0)},
    "ipm": {"tol": (float, 1e-9)},
    "oracle": {"cap": (int, 60)},
}
STEP_MODES = {"papg-a": "adaptive", "papg-c": "constant"}
DEFAULT_ITER_CAP = {"papg-a": 10_000, "papg-c": 10_000, "asm": 100_000, "admm": 200_000,
                    "ipm": 200, "oracle": 0}


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


@dataclass
class RunConfig:
    """Validated solve configuration (flag > config file > default)."""

    method: str
    instance: str
    out: str
    gamma: float
    seed: int
    values: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.values[key]

    @property
    def stop_regime(self) -> str:
        return self.values["stop"]


def read_config_file(path) -> dict:
    """Parse ``key=value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def build_config(flags: dict, file_values: dict | None = None) -> RunConfig:
    """Merge flags over file values over defaults and validate every key.

    Keys that do not belong to the chosen method are rejected before any
    solve starts.
    """
    file_values = dict(file_values or {})
    merged = {**file_values, **{k: v for k, v in flags.items() if v is not None}}
    method = merged.get("method")
    if method not in METHODS:
        raise ConfigError(f"method must be one of {', '.join(METHODS)} (got {method!r})")
    allowed = {**COMMON_KEYS, **METHOD_KEYS[method]}
    unknown = sorted(set(merged) - set(allowed))
    if unknown:
        raise ConfigError(f"keys not valid for method {method}: {', '.join(unknown)}")
    values = {}
    for key, (parse, default) in allowed.items():
        if key in merged:
            try:
                values[key] = parse(merged[key])
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {merged[key]!r}") from exc
        else:
            values[key] = default
    if values["iter_cap"] is None:
        values["iter_cap"] = DEFAULT_ITER_CAP[method]
    if not values["instance"]:
        raise ConfigError("an instance path is required")
    if values["stop"] not in ("gap", "accuracy"):
        raise ConfigError("stop must be 'gap' or 'accuracy'")
    if values["stop"] == "accuracy" and not values["oracle"]:
        raise ConfigError("the accuracy stopping regime needs --oracle")
    if method in ("papg-a", "papg-c", "asm", "ipm") and not values["gamma"] > 0:
        raise ConfigError("gamma must be positive for this method")
    if method == "admm" and not values["rho"] > 0:
        raise ConfigError("rho must be positive")
    if method in ("papg-a", "papg-c"):
        if values["K"] < 1:
            raise ConfigError("K must be at least one")
        implied = STEP_MODES[method]
        if values["step_mode"] not in (None, implied):
            raise ConfigError(f"step_mode {values['step_mode']!r} contradicts method {method} "
                              f"(which uses {implied!r})")
        values["step_mode"] = implied
    if values["time_cap_s"] <= 0:
        raise ConfigError("time_cap_s must be positive")
    return RunConfig(method, values["instance"], values["out"], values["gamma"],
                     values["seed"], values)


# ----------------------------------------------------------------------------
# oracle files
# ----------------------------------------------------------------------------


def oracle_document(dataset: Dataset, gamma: float, cap: int = 60) -> dict:
    """Unregularized and ``gamma``-regularized reference solutions of an instance."""
    from .synth import oracle_solve

    doc = {"instance_hash": dataset.fingerprint(), "n": dataset.n, "N": dataset.N}
    runs = [("unregularized", 0.0)] + ([("regularized", gamma)] if gamma > 0 else [])
    for name, g in runs:
        sol = oracle_solve(dataset, g, cap=cap)
        doc[name] = {"gamma": g, "objective": sol.objective, "kkt_residual": sol.kkt_residual,
                     "y": [float(v) for v in sol.y],
                     "xi": [[float(v) for v in r] for r in sol.xi],
                     "theta": [float(v) for v in sol.theta],
                     "tight": [int(i) for i in sol.tight]}
    return doc


def load_oracle(path, dataset: Dataset) -> dict:
    doc = json.loads(Path(path).read_text())
    if doc.get("instance_hash") != dataset.fingerprint():
        raise ConfigError(f"oracle file {path} was computed for a different instance")
    return doc


# ----------------------------------------------------------------------------
# summaries
# ----------------------------------------------------------------------------


def summarize(dataset: Dataset, model: PrimalPoint, theta: np.ndarray | None, scope: str,
              gamma: float, oracle: dict | None, K: int | None = None) -> dict:
    """Table metrics computed from a saved model alone.

    ``scope`` says which rows ``theta`` covers: ``"all"`` shape rows or
    ``"cross"`` block rows of a ``K``-block partition.
    """
    N = dataset.N
    if theta is None:
        gap = None
    elif scope == "cross":
        op = ConstraintOperator(dataset.points, Partition(N, K))
        gap = float(theta @ op.C(model)) / (N * N - N)
    else:
        op = ConstraintOperator(dataset.points)
        gap = float(theta @ op.A(model)) / (N * N - N)
    out = {"infeasibility": infeasibility(dataset, model), "dualgap": gap,
           "objective": objective(dataset, model, gamma), "subopt_reg": None, "accuracy": None}
    if oracle is not None:
        out["accuracy"] = accuracy(model, np.array(oracle["unregularized"]["y"]))
        ref = oracle["unregularized"] if gamma == 0 else oracle.get("regularized")
        if ref is not None and ref["gamma"] == gamma:
            p_star = ref["objective"]
            if p_star != 0:
                out["subopt_reg"] = abs(out["objective"] - p_star) / p_star
    return out


# ----------------------------------------------------------------------------
# solve
# ----------------------------------------------------------------------------


def _stop_rule(cfg: RunConfig, oracle: dict | None) -> StopRule:
    y_star = None
    if cfg.stop_regime == "accuracy":
        y_star = np.array(oracle["unregularized"]["y"])
    return StopRule(infeas_tol=cfg["infeas_tol"], gap_tol=cfg["gap_tol"],
                    iter_cap=cfg["iter_cap"], time_cap_s=cfg["time_cap_s"],
                    accuracy_tol=cfg["accuracy_tol"], y_star=y_star)


def run_method(cfg: RunConfig, dataset: Dataset, oracle: dict | None):
    """Dispatch one solve.

    Returns ``(model, theta, scope, report, exit_code, gamma)`` where ``gamma``
    is the weight the returned model was fitted with.
    """
    from .reports import SolveReport

    stop = _stop_rule(cfg, oracle)
    m = cfg.method
    if m in ("papg-a", "papg-c"):
        from .papg import ContinuationSchedule, continuation_solve, papg_solve

        step = cfg["step_mode"]
        if cfg["continuation"]:
            sched = ContinuationSchedule(cfg["eps0"], cfg["beta"], cfg["kappa_gamma"],
                                         cfg["kappa_delta"], cfg["stages"])
            eta, rep = continuation_solve(dataset, sched, cfg["K"], stop=stop, step_mode=step,
                                          growth=cfg["upsilon_step"], workers=cfg["workers"],
                                          y_star=stop.y_star)
            theta = rep.extras["theta"]
            code = EXIT_OK if rep.status == "converged" else EXIT_CAP
            return eta, theta, "cross", rep, code, sched.gamma(sched.stages)
        xi_norm = None
        if oracle is not None:
            xi_norm = float(np.linalg.norm(oracle["unregularized"]["xi"]))
        eta, theta, rep = papg_solve(dataset, cfg.gamma, cfg["K"], stop=stop, step_mode=step,
                                     growth=cfg["upsilon_step"], workers=cfg["workers"],
                                     certify=True, certify_every=1 if step == "adaptive" else 10,
                                     xi_star_norm=xi_norm)
        code = EXIT_OK if rep.status == "converged" else EXIT_CAP
        return eta, theta, "cross", rep, code, cfg.gamma
    if m == "asm":
        from .asm import asm_solve

        eta, theta_rows, rep = asm_solve(dataset, cfg.gamma, alpha=cfg["alpha"],
                                         iter_cap=cfg["iter_cap"], time_cap_s=cfg["time_cap_s"])
        op = ConstraintOperator(dataset.points)
        theta = np.zeros(op.m)
        for r, v in theta_rows.items():
            theta[r] = v
        return eta, theta, "all", rep, EXIT_OK if rep.converged else EXIT_CAP, cfg.gamma
    if m == "admm":
        from .admm import admm_solve

        eta, theta, rep = admm_solve(dataset, cfg["rho"], stop)
        rep.extras.pop("state", None)
        return eta, theta, "all", rep, EXIT_OK if rep.converged else EXIT_CAP, 0.0
    if m == "ipm":
        from .ipm import ipm_full
        from .reports import Clock

        clock = Clock()
        eta, theta, irep = ipm_full(dataset, cfg.gamma, tol=cfg["tol"], iter_cap=cfg["iter_cap"])
        rep = SolveReport("ipm", status=irep.status, iterations=irep.iterations,
                          walltime_s=clock.elapsed(), columns=("k",))
        return eta, theta, "all", rep, EXIT_OK if irep.converged else EXIT_CAP, cfg.gamma
    # oracle as a solver
    from .reports import Clock
    from .synth import oracle_solve

    clock = Clock()
    sol = oracle_solve(dataset, cfg.gamma, cap=cfg["cap"])
    rep = SolveReport("oracle", status="converged", iterations=0, walltime_s=clock.elapsed(),
                      columns=("k",))
    return sol.point, sol.theta, "all", rep, EXIT_OK, cfg.gamma


def cmd_solve(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        dataset = Dataset.from_csv(cfg.instance)
        oracle = load_oracle(cfg["oracle"], dataset) if cfg["oracle"] else None
        model, theta, scope, rep, code, gamma_used = run_method(cfg, dataset, oracle)
    except Exception as exc:  # reported as a diagnostic file, then exit 1
        diag = {"method": cfg.method, "instance": cfg.instance, "error": type(exc).__name__,
                "message": str(exc), "traceback": traceback.format_exc()}
        (out / "error.json").write_text(json.dumps(diag, indent=2) + "\n")
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    model.to_json(out / "model.json")
    rep.metrics_csv(out / "metrics.csv")
    K = cfg["K"] if scope == "cross" else None
    (out / "multipliers.json").write_text(dumps17(
        {"scope": scope, "K": K, "theta": [float(v) for v in np.asarray(theta)]}))
    summary = {"method": cfg.method, "instance": str(cfg.instance),
               "instance_hash": dataset.fingerprint(), "gamma": gamma_used, "status": rep.status,
               "iterations": int(rep.iterations), "walltime_s": float(rep.walltime_s),
               "preprocess_s": float(rep.preprocess_s), "K": K,
               **summarize(dataset, model, np.asarray(theta), scope, gamma_used, oracle, K)}
    (out / "summary.json").write_text(dumps17(summary))
    print(format_table([summary]))
    return code


# ----------------------------------------------------------------------------
# compare
# ----------------------------------------------------------------------------

TABLE_COLUMNS = ("method", "status", "iterations") + SUMMARY_FIELDS


def _cell(v) -> str:
    if v is None:
        return "N/A"
    if isinstance(v, float):
        return f"{v:.3e}"
    return str(v)


def format_table(rows: list[dict]) -> str:
    cells = [[c for c in TABLE_COLUMNS]] + [[_cell(r.get(c)) for c in TABLE_COLUMNS] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(TABLE_COLUMNS))]
    return "\n".join("  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in cells)


def cmd_compare(run_dirs: list[str], csv_path: str | None = None) -> int:
    rows = [json.loads((Path(d) / "summary.json").read_text()) for d in run_dirs]
    if len(rows) < 2:
        raise ConfigError("compare needs at least two runs")
    hashes = {r["instance_hash"] for r in rows}
    if len(hashes) > 1:
        raise ConfigError("runs were made on different instances")
    rows.sort(key=lambda r: METHODS.index(r["method"]) if r["method"] in METHODS else len(METHODS))
    print(format_table(rows))
    if csv_path:
        import csv

        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TABLE_COLUMNS)
            for r in rows:
                w.writerow(["" if r.get(c) is None else
                            (format(r[c], ".17g") if isinstance(r[c], float) else r[c])
                            for c in TABLE_COLUMNS])
    return EXIT_OK


# ----------------------------------------------------------------------------
# argument parsing
# ----------------------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="convexreg", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic instance (CSV + JSON sidecar)")
    g.add_argument("--kind", choices=("quadratic", "exponential"), required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--N", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", default=None, help="CSV path (default <kind>_n<n>_N<N>_s<seed>.csv)")

    s = sub.add_parser("solve", help="run one solver on an instance")
    s.add_argument("--config", help="key=value file; flags override it")
    s.add_argument("--method", choices=METHODS)
    s.add_argument("--instance")
    s.add_argument("--out", help="output directory")
    s.add_argument("--oracle", help="oracle JSON from the oracle command")
    s.add_argument("--stop", choices=("gap", "accuracy"))
    s.add_argument("--step-mode", dest="step_mode", choices=("adaptive", "constant"),
                   help="optional; must agree with the papg method name")
    for key, typ in (("gamma", float), ("seed", int), ("infeas_tol", float),
                     ("gap_tol", float), ("accuracy_tol", float), ("iter_cap", int),
                     ("time_cap_s", float), ("K", int), ("upsilon_step", float),
                     ("workers", int), ("eps0", float), ("beta", float),
                     ("kappa_gamma", float), ("kappa_delta", float), ("stages", int),
                     ("alpha", float), ("rho", float), ("tol", float), ("cap", int)):
        flag = "--" + key.replace("_", "-")
        s.add_argument(flag, dest=key, type=typ)
    s.add_argument("--continuation", action="store_const", const="true", default=None)

    c = sub.add_parser("compare", help="tabulate finished runs on one instance")
    c.add_argument("runs", nargs="+", help="run directories")
    c.add_argument("--csv", help="also write the table as CSV")

    o = sub.add_parser("oracle", help="dense reference solutions of an instance")
    o.add_argument("--instance", required=True)
    o.add_argument("--gamma", type=float, default=1e-4)
    o.add_argument("--cap", type=int, default=60)
    o.add_argument("--out", required=True, help="JSON path")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "generate":
            from .synth import gen_instance, write_instance

            ds, truth = gen_instance(args.kind, args.n, args.N, args.seed)
            path = args.out or f"{args.kind}_n{args.n}_N{args.N}_s{args.seed}.csv"
            side = write_instance(ds, truth, path)
            print(f"wrote {path} and {side}")
            return EXIT_OK
        if args.command == "oracle":
            ds = Dataset.from_csv(args.instance)
            doc = oracle_document(ds, args.gamma, args.cap)
            Path(args.out).write_text(dumps17(doc))
            print(f"wrote {args.out}")
            return EXIT_OK
        if args.command == "compare":
            return cmd_compare(args.runs, args.csv)
        flags = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
        file_values = read_config_file(args.config) if args.config else {}
        cfg = build_config(flags, file_values)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return cmd_solve(cfg)


if __name__ == "__main__":
    sys.exit(main())
