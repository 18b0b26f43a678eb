import json

import cvxpy as cp
import numpy as np
import pytest
from hypothesis import given, strategies as st

from convexreg.model import ConstraintOperator, Dataset
from convexreg.synth import (COND, OracleCapError, condition_transform, gen_instance,
                             least_norm_subgradients, oracle_solve, write_instance)
from conftest import instance, oracle, random_dataset


def cvxpy_reference(ds, gamma):
    op = ConstraintOperator(ds.points)
    A1, A2 = op.dense()
    y = cp.Variable(ds.N)
    xi = cp.Variable(ds.N * ds.n)
    obj = 0.5 * cp.sum_squares(y - ds.values) + 0.5 * gamma * cp.sum_squares(xi)
    cp.Problem(cp.Minimize(obj), [A1 @ y + A2 @ xi >= 0]).solve(
        solver="CLARABEL", tol_gap_abs=1e-12, tol_gap_rel=1e-12, tol_feas=1e-12)
    return y.value, xi.value.reshape(ds.N, ds.n)


class TestGenerator:
    @pytest.mark.parametrize("kind", ["quadratic", "exponential"])
    def test_deterministic(self, kind):
        a, _ = gen_instance(kind, 3, 25, 11)
        b, _ = gen_instance(kind, 3, 25, 11)
        c, _ = gen_instance(kind, 3, 25, 12)
        assert a.to_csv() == b.to_csv()
        assert a.to_csv() != c.to_csv()

    @pytest.mark.parametrize("n", [5, 20])
    def test_condition_number(self, n):
        _, truth = gen_instance("quadratic", n, n + 5, 0)
        assert truth.cond == pytest.approx(COND, rel=1e-9)
        assert np.allclose(truth.Q, truth.Q.T)

    def test_one_dimensional_quadratic_unchanged(self):
        _, truth = gen_instance("quadratic", 1, 5, 0)
        assert truth.cond == 1.0

    @pytest.mark.parametrize("N", [10, 33, 100])
    def test_perturbed_count(self, N):
        _, truth = gen_instance("exponential", 2, N, 4)
        idx = truth.perturbed_indices
        assert len(idx) == int(0.3 * N)
        assert len(set(idx.tolist())) == len(idx)

    def test_exponential_direction_range(self):
        _, truth = gen_instance("exponential", 6, 10, 2)
        assert truth.Q is None
        assert np.all((truth.p >= 0) & (truth.p <= 0.2))

    def test_invalid_sizes(self):
        with pytest.raises(ValueError):
            gen_instance("quadratic", 10, 5, 0)
        with pytest.raises(ValueError):
            gen_instance("cubic", 2, 5, 0)

    def test_sidecar(self, tmp_path):
        ds, truth = gen_instance("quadratic", 2, 12, 3)
        side = write_instance(ds, truth, tmp_path / "inst.csv")
        meta = json.loads(side.read_text())
        assert meta["kind"] == "quadratic" and meta["n"] == 2 and meta["N"] == 12
        assert meta["seed"] == 3
        assert meta["perturbed_indices"] == truth.perturbed_indices.tolist()
        assert Dataset.from_csv(tmp_path / "inst.csv").to_csv() == ds.to_csv()

    @given(st.integers(2, 6), st.integers(0, 10_000))
    def test_condition_transform(self, n, seed):
        rng = np.random.default_rng(seed)
        B = rng.normal(size=(n, n))
        M = condition_transform(B.T @ B)
        s = np.linalg.svd(M, compute_uv=False)
        assert s[0] / s[-1] == pytest.approx(COND, rel=1e-6)


class TestOracle:
    def test_matches_cvxpy_regularized(self):
        ds = random_dataset(10, 2, seed=1)
        ref = oracle_solve(ds, 0.05)
        y, xi = cvxpy_reference(ds, 0.05)
        assert np.allclose(ref.y, y, atol=1e-6)
        assert np.allclose(ref.xi, xi, atol=1e-6)

    def test_unregularized_values_match_cvxpy(self):
        ds = random_dataset(10, 2, seed=2)
        ref = oracle_solve(ds, 0.0)
        y, _ = cvxpy_reference(ds, 0.0)
        assert np.allclose(ref.y, y, atol=1e-6)

    def test_affine_data_fit_exactly(self):
        rng = np.random.default_rng(3)
        X = rng.normal(size=(12, 3))
        ds = Dataset(X, X @ np.array([1.0, -2.0, 0.5]) + 4.0)
        ref = oracle_solve(ds, 0.0)
        assert ref.objective == 0.0
        assert np.array_equal(ref.y, ds.values)
        assert ConstraintOperator(X).A(ref.point).min() >= -1e-12

    @pytest.mark.parametrize("kind,n,N", [("quadratic", 2, 20), ("exponential", 2, 20),
                                          ("quadratic", 3, 30)])
    def test_kkt_residual(self, kind, n, N):
        for gamma in (0.0, 1e-2, 1e-4):
            assert oracle(kind, n, N, 0, gamma).kkt_residual <= 1e-9

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_holder_bound_and_norm_ordering(self, seed):
        base = oracle("quadratic", 2, 20, seed, 0.0)
        for gamma in (1e-2, 1e-3, 1e-4):
            reg = oracle("quadratic", 2, 20, seed, gamma)
            assert np.linalg.norm(reg.y - base.y) <= base.xi_norm * np.sqrt(gamma)
            assert reg.xi_norm <= base.xi_norm + 1e-9

    def test_least_norm_subgradients_match_cvxpy(self):
        ds = random_dataset(8, 2, seed=4)
        ref = oracle_solve(ds, 0.0)
        op = ConstraintOperator(ds.points)
        A1, A2 = op.dense()
        xi = cp.Variable(8 * 2)
        cp.Problem(cp.Minimize(cp.sum_squares(xi)), [A1 @ ref.y + A2 @ xi >= -1e-9]).solve(
            solver="CLARABEL", tol_gap_abs=1e-12, tol_gap_rel=1e-12, tol_feas=1e-12)
        assert ref.xi_least_norm
        assert ref.xi_norm == pytest.approx(np.linalg.norm(xi.value), rel=1e-5)

    def test_least_norm_is_feasible(self):
        ds = random_dataset(9, 2, seed=5)
        ref = oracle_solve(ds, 0.0, least_norm=False)
        xi = least_norm_subgradients(ds, ref.y, ref.xi)
        assert np.linalg.norm(xi) <= np.linalg.norm(ref.xi) + 1e-9
        vals = ConstraintOperator(ds.points).A(np.concatenate([ref.y, xi.ravel()]))
        assert vals.min() >= -1e-7

    def test_tight_rows_carry_multipliers(self):
        ref = oracle("quadratic", 2, 20, 1, 0.0)
        nonzero = np.flatnonzero(ref.theta > 0)
        assert set(nonzero.tolist()) <= set(ref.tight.tolist())

    def test_cap(self):
        ds, _ = instance("quadratic", 2, 40, 0)
        with pytest.raises(OracleCapError, match="cap"):
            oracle_solve(ds, 0.0, cap=30)
        with pytest.raises(ValueError):
            oracle_solve(ds, -1.0)
