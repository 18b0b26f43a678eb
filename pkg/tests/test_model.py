import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from convexreg.model import (ConstraintOperator, Dataset, DimensionError, Partition,
                             PrimalPoint, accuracy, colocate_duplicates, duality_gap,
                             infeasibility, max_affine_round, objective, predict, row_index,
                             row_pair, slater_point, upsilon)
from conftest import instance, oracle, random_dataset

sizes = st.tuples(st.integers(2, 8), st.integers(1, 3))


def dense_C(op):
    A1, A2 = op.dense()
    A = np.hstack([A1, A2])
    part = op.partition
    lab = part.labels()
    rows = []
    # cross-block rows grouped by block pair, lexicographic inside each group
    for bi, bj in part.block_pairs():
        for l1 in np.flatnonzero(lab == bi):
            for l2 in np.flatnonzero(lab == bj):
                rows.append(A[row_index(l1, l2, op.N)])
    return np.array(rows).reshape(-1, A.shape[1])


class TestA1:
    def test_two_points(self):
        op = ConstraintOperator(np.zeros((2, 1)))
        assert op.A1([1.0, 3.0]).tolist() == [2.0, -2.0]

    def test_constant_vector_maps_to_zero(self):
        op = ConstraintOperator(np.random.default_rng(0).normal(size=(5, 2)))
        assert np.all(op.A1(np.full(5, 3.7)) == 0.0)

    def test_matches_dense(self, rng):
        op = ConstraintOperator(rng.normal(size=(5, 2)))
        A1, _ = op.dense()
        y = rng.normal(size=5)
        assert np.allclose(op.A1(y), A1 @ y, atol=1e-12, rtol=0)

    def test_adjoint_examples(self, rng):
        op = ConstraintOperator(np.zeros((2, 1)))
        assert op.A1T(np.zeros(2)).tolist() == [0.0, 0.0]
        assert op.A1T([1.0, 0.0]).tolist() == [-1.0, 1.0]
        op5 = ConstraintOperator(rng.normal(size=(5, 2)))
        z = rng.normal(size=op5.m)
        assert np.allclose(op5.A1T(z), op5.dense()[0].T @ z, atol=1e-12, rtol=0)

    def test_dimension_mismatch(self):
        op = ConstraintOperator(np.zeros((3, 1)))
        with pytest.raises(DimensionError):
            op.A1(np.zeros(4))
        with pytest.raises(DimensionError):
            op.A1T(np.zeros(5))


class TestA2:
    def test_hand_rows(self):
        op = ConstraintOperator(np.array([[0.0], [1.0]]))
        assert op.A2([2.0, 5.0]).tolist() == [-2.0, 5.0]

    def test_zero(self):
        op = ConstraintOperator(np.random.default_rng(1).normal(size=(4, 3)))
        assert np.all(op.A2(np.zeros(12)) == 0.0)

    def test_matches_dense(self, rng):
        op = ConstraintOperator(rng.normal(size=(6, 3)))
        _, A2 = op.dense()
        xi = rng.normal(size=18)
        w = rng.normal(size=op.m)
        assert np.allclose(op.A2(xi), A2 @ xi, atol=1e-12, rtol=0)
        assert np.allclose(op.A2T(w), A2.T @ w, atol=1e-12, rtol=0)


class TestC:
    def test_single_block_is_empty(self):
        op = ConstraintOperator(np.random.default_rng(2).normal(size=(6, 2)), Partition(6, 1))
        eta = PrimalPoint(np.ones(6), np.ones((6, 2)))
        assert op.C(eta).size == 0

    def test_affine_data_gives_zero(self, rng):
        X = rng.normal(size=(8, 2))
        slope = np.array([1.5, -0.5])
        eta = PrimalPoint(X @ slope + 2.0, np.tile(slope, (8, 1)))
        op = ConstraintOperator(X, Partition(8, 2))
        assert np.allclose(op.C(eta), 0.0, atol=1e-12)

    def test_matches_dense_submatrix(self, rng):
        op = ConstraintOperator(rng.normal(size=(8, 2)), Partition(8, 2))
        Cd = dense_C(op)
        eta = rng.normal(size=op.n_var)
        th = rng.normal(size=op.m_cross)
        assert np.allclose(op.C(eta), Cd @ eta, atol=1e-12, rtol=0)
        assert np.allclose(op.CT_vec(th), Cd.T @ th, atol=1e-12, rtol=0)

    def test_needs_partition(self):
        op = ConstraintOperator(np.zeros((4, 1)))
        with pytest.raises(ValueError):
            op.C(np.zeros(8))


@given(sizes, st.integers(0, 2 ** 32 - 1))
def test_adjoint_consistency(size, seed):
    N, n = size
    rng = np.random.default_rng(seed)
    K = 2 if N % 2 == 0 else 1
    op = ConstraintOperator(rng.normal(size=(N, n)), Partition(N, K))
    y, xi, z = rng.normal(size=N), rng.normal(size=N * n), rng.normal(size=op.m)
    th = rng.normal(size=op.m_cross)
    eta = np.concatenate([y, xi])
    assert abs(op.A1(y) @ z - y @ op.A1T(z)) <= 1e-10 * np.linalg.norm(y) * np.linalg.norm(z)
    assert abs(op.A2(xi) @ z - xi @ op.A2T(z)) <= 1e-10 * np.linalg.norm(xi) * np.linalg.norm(z)
    if th.size:
        lhs, rhs = op.C(eta) @ th, eta @ op.CT_vec(th)
        assert abs(lhs - rhs) <= 1e-10 * np.linalg.norm(eta) * np.linalg.norm(th)


@given(sizes, st.integers(0, 2 ** 32 - 1))
def test_row_semantics_match_dense(size, seed):
    N, n = size
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(N, n))
    op = ConstraintOperator(X)
    A1, A2 = op.dense()
    y, xi = rng.normal(size=N), rng.normal(size=(N, n))
    got = op.A(PrimalPoint(y, xi))
    for l1 in range(N):
        for l2 in range(N):
            if l1 != l2:
                r = row_index(l1, l2, N)
                want = y[l2] - y[l1] + xi[l1] @ (X[l1] - X[l2])
                assert abs(got[r] - want) <= 1e-12 * (1 + abs(want))
    assert np.allclose(np.hstack([A1, A2]) @ np.concatenate([y, xi.ravel()]), got,
                       atol=1e-12, rtol=0)


@given(st.integers(2, 50), st.data())
def test_row_index_is_a_bijection(N, data):
    l1 = data.draw(st.integers(0, N - 1))
    l2 = data.draw(st.integers(0, N - 2))
    l2 += l2 >= l1
    r = row_index(l1, l2, N)
    assert 0 <= r < N * (N - 1)
    assert row_pair(r, N) == (l1, l2)
    if l2 + 1 < N and l2 + 1 != l1:
        assert row_index(l1, l2 + 1, N) == r + 1


def test_row_index_rejects_diagonal():
    with pytest.raises(ValueError):
        row_index(2, 2, 5)


class TestInfeasibility:
    def test_slater_point_is_feasible(self):
        ds = random_dataset(10, 2, seed=3)
        assert infeasibility(ds, slater_point(ds, 0.7)) == 0.0

    def test_flipped_collinear_pair(self):
        # feasible affine fit y = x with one value flipped: rows (-2, 2)
        ds = Dataset(np.array([[0.0], [1.0]]), np.zeros(2))
        eta = PrimalPoint([1.0, 0.0], [[1.0], [1.0]])
        assert infeasibility(ds, eta) == pytest.approx(np.sqrt(2.0), abs=1e-15)

    def test_oracle_solution_is_feasible(self):
        ds, _ = instance("quadratic", 2, 20, 1)
        sol = oracle("quadratic", 2, 20, 1, 1e-4)
        assert infeasibility(ds, sol.point) <= 1e-12


class TestDualityGap:
    def test_zero_multipliers(self, rng):
        op = ConstraintOperator(rng.normal(size=(6, 2)), Partition(6, 2))
        assert duality_gap(op, np.zeros(op.m_cross), PrimalPoint(rng.normal(size=6),
                                                                  rng.normal(size=(6, 2)))) == 0.0

    def test_oracle_complementarity(self):
        ds, _ = instance("quadratic", 2, 20, 1)
        sol = oracle("quadratic", 2, 20, 1, 1e-4)
        op = ConstraintOperator(ds.points, Partition(20, 2))
        theta = op.cross_from_pairs(ConstraintOperator(ds.points).to_pairs(sol.theta))
        assert abs(duality_gap(op, theta, sol.point)) <= 1e-8

    @given(st.integers(0, 2 ** 32 - 1))
    def test_feasible_point_nonnegative(self, seed):
        rng = np.random.default_rng(seed)
        ds = random_dataset(8, 2, seed=seed % 1000)
        op = ConstraintOperator(ds.points, Partition(8, 2))
        th = rng.uniform(0, 1, size=op.m_cross)
        assert duality_gap(op, th, slater_point(ds, rng.uniform(0.1, 2.0))) >= 0.0


class TestSlater:
    def test_hand_instance(self):
        ds = Dataset(np.array([[-1.0], [1.0]]), np.zeros(2))
        sp = slater_point(ds, 2.0)
        assert sp.y.tolist() == [1.0, 1.0]
        assert sp.xi.ravel().tolist() == [-2.0, 2.0]
        op = ConstraintOperator(ds.points)
        assert op.A(sp).tolist() == [4.0, 4.0]
        assert 2.0 * upsilon(ds) / 2 == 4.0

    def test_repeated_locations_flagged(self):
        ds = Dataset(np.ones((3, 2)), np.arange(3.0))
        with pytest.warns(RuntimeWarning):
            sp = slater_point(ds, 1.0)
        assert upsilon(ds) == 0.0
        assert np.all(ConstraintOperator(ds.points).A(sp) == 0.0)

    def test_alpha_must_be_positive(self):
        with pytest.raises(ValueError):
            slater_point(random_dataset(4, 1), 0.0)

    @given(st.integers(3, 12), st.integers(1, 3), st.floats(1e-3, 10.0),
           st.integers(0, 10_000))
    def test_strict_feasibility_margin(self, N, n, alpha, seed):
        ds = random_dataset(N, n, seed)
        ups = upsilon(ds)
        rows = ConstraintOperator(ds.points).A(slater_point(ds, alpha))
        assert rows.min() >= alpha * ups / 2 - 1e-12 * max(1.0, np.abs(rows).max())

    @given(st.floats(1e-3, 10.0))
    def test_any_alpha_is_feasible(self, alpha):
        assert infeasibility(random_dataset(9, 2, 4), slater_point(random_dataset(9, 2, 4),
                                                                    alpha)) == 0.0


class TestPredict:
    def test_feasible_model_interpolates(self):
        ds, _ = instance("quadratic", 2, 20, 1)
        sol = oracle("quadratic", 2, 20, 1, 1e-4)
        for l in range(ds.N):
            assert predict(sol.point, ds, ds.points[l]) == pytest.approx(sol.y[l], abs=1e-9)

    def test_affine_model(self, rng):
        X = rng.normal(size=(4, 2))
        a, b = np.array([0.3, -1.2]), 0.4
        ds = Dataset(X, X @ a + b)
        model = PrimalPoint(X @ a + b, np.tile(a, (4, 1)))
        q = rng.normal(size=(7, 2))
        assert np.allclose(predict(model, ds, q), q @ a + b, atol=1e-12)

    def test_single_observation(self):
        ds = Dataset(np.array([[1.0, 2.0]]), np.array([3.0]))
        model = PrimalPoint([3.0], [[0.5, -1.0]])
        assert predict(model, ds, np.array([2.0, 0.0])) == pytest.approx(3.0 + 0.5 + 2.0)

    def test_quadratic_fit_underestimates_with_bounded_error(self):
        ds, truth = instance("quadratic", 2, 50, 0)
        sol = oracle("quadratic", 2, 50, 0, 0.0)
        q = np.random.default_rng(5).normal(0.0, 1.0, size=(200, 2))
        err = predict(sol.point, ds, q) - truth(q)
        # frozen from the dense reference fit; noise standard deviation is 10
        assert np.sqrt(np.mean(err ** 2)) == pytest.approx(2.3777178479597465, rel=1e-6)
        assert err.mean() < 0

    def test_dimension_mismatch(self):
        ds = random_dataset(4, 2)
        with pytest.raises(DimensionError):
            predict(PrimalPoint(np.zeros(4), np.zeros((4, 2))), ds, np.zeros(3))

    @given(st.integers(0, 10_000), st.floats(0, 1))
    def test_convex_in_x(self, seed, lam):
        rng = np.random.default_rng(seed)
        ds = random_dataset(7, 2, seed)
        model = PrimalPoint(rng.normal(size=7), rng.normal(size=(7, 2)))
        x1, x2 = rng.normal(size=2) * 3, rng.normal(size=2) * 3
        f = lambda x: predict(model, ds, x)  # noqa: E731
        assert f(lam * x1 + (1 - lam) * x2) <= lam * f(x1) + (1 - lam) * f(x2) + 1e-12


class TestMetricsAndRounding:
    def test_objective_and_accuracy(self):
        ds = Dataset(np.array([[0.0], [1.0]]), np.array([1.0, 2.0]))
        eta = PrimalPoint([0.0, 0.0], [[1.0], [2.0]])
        assert objective(ds, eta, 0.5) == pytest.approx(0.5 * 5 + 0.25 * 5)
        assert accuracy(eta, np.array([3.0, 4.0])) == pytest.approx(5 / np.sqrt(2))

    @given(st.integers(0, 10_000))
    def test_max_affine_round_is_feasible(self, seed):
        rng = np.random.default_rng(seed)
        ds = random_dataset(9, 2, seed)
        eta = PrimalPoint(rng.normal(size=9) * 5, rng.normal(size=(9, 2)))
        assert infeasibility(ds, max_affine_round(ds, eta)) <= 1e-12

    def test_colocate_duplicates(self):
        X = np.array([[0.0], [1.0], [0.0], [2.0], [1.0], [3.0]])
        ds = Dataset(X, np.zeros(6))
        perm = colocate_duplicates(ds, 2)
        re = ds.reorder(perm)
        assert sorted(perm.tolist()) == list(range(6))
        assert upsilon(re, Partition(6, 2)) > 0

    def test_partition_validation(self):
        with pytest.raises(ValueError):
            Partition(7, 2)
        with pytest.raises(ValueError):
            Partition(6, 2).check(2)


class TestIO:
    def test_csv_roundtrip_is_exact(self, tmp_path):
        ds = random_dataset(6, 3, seed=8)
        p = tmp_path / "d.csv"
        ds.to_csv(p)
        assert p.read_text().splitlines()[0] == "x1,x2,x3,y"
        back = Dataset.from_csv(p)
        assert np.array_equal(back.points, ds.points) and np.array_equal(back.values, ds.values)
        assert back.fingerprint() == ds.fingerprint()

    def test_model_json_roundtrip(self, tmp_path, rng):
        m = PrimalPoint(rng.normal(size=5), rng.normal(size=(5, 2)))
        p = tmp_path / "m.json"
        m.to_json(p)
        doc = json.loads(p.read_text())
        assert set(doc) == {"n", "N", "y", "xi"} and doc["N"] == 5 and doc["n"] == 2
        back = PrimalPoint.from_json(p)
        assert np.array_equal(back.y, m.y) and np.array_equal(back.xi, m.xi)

    def test_bad_header(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("a,b\n1,2\n")
        with pytest.raises(ValueError):
            Dataset.from_csv(p)

    def test_nonfinite_rejected(self):
        with pytest.raises(ValueError):
            Dataset(np.array([[np.nan]]), np.array([1.0]))
