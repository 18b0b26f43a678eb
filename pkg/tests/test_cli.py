import csv
import json
import math
import subprocess
import sys
import time

import numpy as np
import pytest

from convexreg.cli import (EXIT_CAP, EXIT_ERROR, EXIT_OK, ConfigError, build_config, main,
                           read_config_file, summarize)
from convexreg.model import Dataset, PrimalPoint
from convexreg.reports import BOUND_COLUMNS, DUAL_COLUMNS


@pytest.fixture
def toy(tmp_path):
    """A small instance with its oracle file."""
    csv_path = tmp_path / "toy.csv"
    assert main(["generate", "--kind", "quadratic", "--n", "2", "--N", "12", "--seed", "1",
                 "--out", str(csv_path)]) == EXIT_OK
    orc = tmp_path / "toy_oracle.json"
    assert main(["oracle", "--instance", str(csv_path), "--gamma", "0.01",
                 "--out", str(orc)]) == EXIT_OK
    return csv_path, orc


def solve(tmp_path, name, *args):
    out = tmp_path / name
    code = main(["solve", "--out", str(out), *args])
    return code, out


class TestGenerate:
    def test_byte_identical(self, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        for p in (a, b):
            assert main(["generate", "--kind", "exponential", "--n", "3", "--N", "20",
                         "--seed", "5", "--out", str(p)]) == EXIT_OK
        assert a.read_bytes() == b.read_bytes()
        assert a.with_suffix(".json").read_bytes() == b.with_suffix(".json").read_bytes()

    def test_invalid_sizes(self, tmp_path, capsys):
        code = main(["generate", "--kind", "quadratic", "--n", "10", "--N", "5",
                     "--out", str(tmp_path / "x.csv")])
        assert code == EXIT_ERROR
        assert "N >= n + 1" in capsys.readouterr().err

    def test_module_entry_point(self, tmp_path):
        res = subprocess.run([sys.executable, "-m", "convexreg", "generate", "--kind",
                              "quadratic", "--n", "1", "--N", "4", "--out",
                              str(tmp_path / "m.csv")], capture_output=True, text=True)
        assert res.returncode == 0
        assert Dataset.from_csv(tmp_path / "m.csv").N == 4


class TestConfig:
    def test_precedence(self, tmp_path):
        cfg_file = tmp_path / "run.cfg"
        cfg_file.write_text("# comment\nmethod = admm\ninstance = a.csv\nrho = 0.5\n"
                            "iter_cap = 30  # trailing comment\n")
        file_values = read_config_file(cfg_file)
        cfg = build_config({"rho": 2.0}, file_values)
        assert cfg["rho"] == 2.0
        assert cfg["iter_cap"] == 30
        assert cfg["gap_tol"] == 5e-7
        assert build_config({}, file_values)["rho"] == 0.5

    def test_default_iteration_caps(self):
        assert build_config({"method": "ipm", "instance": "a.csv"})["iter_cap"] == 200
        assert build_config({"method": "papg-a", "instance": "a.csv"})["iter_cap"] == 10_000

    def test_rejects_foreign_keys(self):
        with pytest.raises(ConfigError, match="rho"):
            build_config({"method": "papg-a", "instance": "a.csv", "rho": 1.0})
        with pytest.raises(ConfigError, match="K"):
            build_config({"method": "asm", "instance": "a.csv", "K": 2})

    def test_validation(self, tmp_path):
        with pytest.raises(ConfigError, match="method"):
            build_config({"instance": "a.csv"})
        with pytest.raises(ConfigError, match="oracle"):
            build_config({"method": "asm", "instance": "a.csv", "stop": "accuracy"})
        with pytest.raises(ConfigError, match="gamma"):
            build_config({"method": "asm", "instance": "a.csv", "gamma": 0.0})
        with pytest.raises(ConfigError, match="bad value"):
            build_config({"method": "admm", "instance": "a.csv", "rho": "fast"})
        bad = tmp_path / "bad.cfg"
        bad.write_text("just words\n")
        with pytest.raises(ConfigError, match="key=value"):
            read_config_file(bad)

    def test_step_mode_must_agree_with_method(self):
        cfg = build_config({"method": "papg-c", "instance": "a.csv", "step_mode": "constant"})
        assert cfg["step_mode"] == "constant"
        assert build_config({"method": "papg-a", "instance": "a.csv"})["step_mode"] == "adaptive"
        with pytest.raises(ConfigError, match="contradicts"):
            build_config({"method": "papg-a", "instance": "a.csv", "step_mode": "constant"})
        with pytest.raises(ConfigError, match="step_mode"):
            build_config({"method": "admm", "instance": "a.csv", "step_mode": "constant"})

    def test_continuation_flag_parses_as_bool(self):
        cfg = build_config({"method": "papg-c", "instance": "a.csv", "continuation": "true"})
        assert cfg["continuation"] is True

    def test_cli_reports_config_errors(self, tmp_path, capsys):
        code, _ = solve(tmp_path, "r", "--method", "papg-a", "--instance", "a.csv",
                        "--rho", "1")
        assert code == EXIT_ERROR
        assert "keys not valid" in capsys.readouterr().err


class TestSolve:
    def test_outputs_and_recomputed_summary(self, tmp_path, toy):
        csv_path, orc = toy
        code, out = solve(tmp_path, "asm", "--method", "asm", "--instance", str(csv_path),
                          "--gamma", "0.01", "--oracle", str(orc))
        assert code == EXIT_OK
        for name in ("model.json", "metrics.csv", "multipliers.json", "summary.json"):
            assert (out / name).is_file()
        summary = json.loads((out / "summary.json").read_text())
        mult = json.loads((out / "multipliers.json").read_text())
        ds = Dataset.from_csv(csv_path)
        again = summarize(ds, PrimalPoint.from_json(out / "model.json"), np.array(mult["theta"]),
                          mult["scope"], summary["gamma"], json.loads(orc.read_text()), mult["K"])
        for key, value in again.items():
            if value is None:
                assert summary[key] is None
            else:
                assert summary[key] == pytest.approx(value, rel=1e-10, abs=1e-14)
        assert summary["subopt_reg"] <= 1e-6
        assert summary["infeasibility"] <= 1e-9

    def test_metrics_header(self, tmp_path, toy):
        csv_path, _ = toy
        code, out = solve(tmp_path, "admm", "--method", "admm", "--instance", str(csv_path),
                          "--iter-cap", "20")
        assert code == EXIT_CAP
        with open(out / "metrics.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["k", "g_value", "gap_norm", "infeas_norm", "step", "stage", "wall_ms"]
        assert len(rows) == 21
        assert json.loads((out / "summary.json").read_text())["status"] == "iter_cap"

    def test_ipm_matches_oracle(self, tmp_path, toy):
        csv_path, orc = toy
        code, out = solve(tmp_path, "ipm", "--method", "ipm", "--instance", str(csv_path),
                          "--gamma", "0.01", "--oracle", str(orc))
        assert code == EXIT_OK
        assert json.loads((out / "summary.json").read_text())["subopt_reg"] <= 1e-6

    def test_papg_cross_multipliers(self, tmp_path, toy):
        csv_path, _ = toy
        code, out = solve(tmp_path, "papg", "--method", "papg-a", "--instance", str(csv_path),
                          "--gamma", "0.01", "--gap-tol", "1e-5", "--K", "2")
        assert code == EXIT_OK
        mult = json.loads((out / "multipliers.json").read_text())
        assert mult["scope"] == "cross" and mult["K"] == 2
        assert len(mult["theta"]) == 2 * 6 * 6

    def test_papg_bound_columns(self, tmp_path, toy):
        csv_path, orc = toy
        code, out = solve(tmp_path, "bounds", "--method", "papg-a", "--instance", str(csv_path),
                          "--gamma", "0.01", "--oracle", str(orc), "--iter-cap", "8")
        assert code == EXIT_CAP
        with open(out / "metrics.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert tuple(rows[0]) == DUAL_COLUMNS + BOUND_COLUMNS
        assert len(rows) == 8
        xi_norm = math.sqrt(sum(v * v for r in json.loads(orc.read_text())["unregularized"]["xi"]
                                for v in r))
        for key in ("b_theta", "alpha_star", "L_gamma"):
            assert len({r[key] for r in rows}) == 1
        for r in rows:
            assert float(r["alpha_star"]) > 0 and float(r["b_theta"]) > 0
            # the suboptimality bound never drops below its regularization term
            assert float(r["subopt_bound"]) >= xi_norm * math.sqrt(0.01) * (1 - 1e-12)
            assert float(r["infeas_bound"]) >= 0

    def test_time_cap_exit_code(self, tmp_path, toy):
        csv_path, _ = toy
        code, out = solve(tmp_path, "cap", "--method", "papg-c", "--instance", str(csv_path),
                          "--time-cap-s", "1e-9")
        assert code == EXIT_CAP
        assert json.loads((out / "summary.json").read_text())["status"] == "time_cap"

    def test_time_cap_honored_within_grace(self, tmp_path):
        big = tmp_path / "big.csv"
        main(["generate", "--kind", "exponential", "--n", "2", "--N", "100", "--out", str(big)])
        t0 = time.perf_counter()
        code, out = solve(tmp_path, "capped", "--method", "papg-c", "--instance", str(big),
                          "--time-cap-s", "1", "--iter-cap", "1000000")
        elapsed = time.perf_counter() - t0
        assert code == EXIT_CAP
        assert json.loads((out / "summary.json").read_text())["status"] == "time_cap"
        # grace: the iteration in flight plus writing the outputs
        assert elapsed <= 1.0 + 5.0

    def test_papg_constant_reaches_toy_accuracy(self, tmp_path):
        inst = tmp_path / "toy20.csv"
        main(["generate", "--kind", "quadratic", "--n", "2", "--N", "20", "--seed", "2",
              "--out", str(inst)])
        orc = tmp_path / "toy20_oracle.json"
        main(["oracle", "--instance", str(inst), "--out", str(orc)])
        code, out = solve(tmp_path, "papgc", "--method", "papg-c", "--instance", str(inst),
                          "--oracle", str(orc), "--stop", "accuracy", "--iter-cap", "100000")
        assert code == EXIT_OK
        summary = json.loads((out / "summary.json").read_text())
        assert summary["accuracy"] <= 5e-3
        assert summary["infeasibility"] <= 1e-1

    def test_oracle_mismatch_writes_diagnostic(self, tmp_path, toy):
        csv_path, _ = toy
        other = tmp_path / "other.csv"
        main(["generate", "--kind", "quadratic", "--n", "2", "--N", "12", "--seed", "2",
              "--out", str(other)])
        orc2 = tmp_path / "other_oracle.json"
        main(["oracle", "--instance", str(other), "--gamma", "0.01", "--out", str(orc2)])
        code, out = solve(tmp_path, "bad", "--method", "asm", "--instance", str(csv_path),
                          "--gamma", "0.01", "--oracle", str(orc2))
        assert code == EXIT_ERROR
        assert "error" in json.loads((out / "error.json").read_text())


class TestCompare:
    def test_order_and_csv(self, tmp_path, toy, capsys):
        csv_path, orc = toy
        runs = []
        for method in ("ipm", "admm", "asm"):
            extra = ["--gamma", "0.01"] if method != "admm" else ["--iter-cap", "50"]
            _, out = solve(tmp_path, method, "--method", method, "--instance", str(csv_path),
                           "--oracle", str(orc), *extra)
            runs.append(str(out))
        table = tmp_path / "table.csv"
        capsys.readouterr()
        assert main(["compare", *runs, "--csv", str(table)]) == EXIT_OK
        printed = capsys.readouterr().out.splitlines()
        assert [line.split()[0] for line in printed[1:]] == ["asm", "admm", "ipm"]
        with open(table) as fh:
            rows = list(csv.DictReader(fh))
        assert [r["method"] for r in rows] == ["asm", "admm", "ipm"]

    def test_instances_must_match(self, tmp_path, toy):
        csv_path, _ = toy
        other = tmp_path / "o.csv"
        main(["generate", "--kind", "exponential", "--n", "2", "--N", "12", "--out", str(other)])
        _, a = solve(tmp_path, "a", "--method", "asm", "--instance", str(csv_path))
        _, b = solve(tmp_path, "b", "--method", "asm", "--instance", str(other))
        assert main(["compare", str(a), str(b)]) == EXIT_ERROR
        assert main(["compare", str(a)]) == EXIT_ERROR
