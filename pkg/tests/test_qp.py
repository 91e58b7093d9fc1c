import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ccbf.qp import QpStatus, QuadraticProgram, format_qp, kkt_residuals, solve_qp
from oracles import enumerate_qp, random_feasible_qp


def qp(H, f, A, c):
    return QuadraticProgram(np.asarray(H, float), np.asarray(f, float), np.asarray(A, float), np.asarray(c, float))


def assert_kkt(p, sol, tol=1e-8):
    res = kkt_residuals(p, sol.z, sol.multipliers)
    scale = 1 + np.abs(p.linear).max() + (np.abs(sol.multipliers).max() if sol.multipliers.size else 0)
    assert res["stationarity"] <= tol * scale, res
    assert res["primal"] <= tol, res
    assert res["complementarity"] <= tol * scale, res
    assert res["dual"] <= tol, res


class TestSmallProblems:
    def test_scalar_lower_bound(self):
        # min (u - 3)^2 s.t. 1 - u >= 0
        p = qp([[2.0]], [-6.0], [[-1.0]], [1.0])
        sol = solve_qp(p)
        assert sol.optimal
        assert sol.z == pytest.approx([1.0])
        assert sol.multipliers == pytest.approx([4.0])

    def test_scalar_inactive(self):
        sol = solve_qp(qp([[2.0]], [-2.0], [[1.0]], [5.0]))
        assert sol.z == pytest.approx([1.0])
        assert sol.multipliers == pytest.approx([0.0])

    def test_scalar_scaled_row(self):
        # row scaling must not leak into the multipliers
        p = qp([[2.0]], [-6.0], [[-4.0]], [4.0])
        sol = solve_qp(p)
        assert sol.z == pytest.approx([1.0])
        assert_kkt(p, sol)

    def test_scalar_infeasible(self):
        sol = solve_qp(qp([[2.0]], [0.0], [[1.0], [-1.0]], [-2.0, 1.0]))
        assert sol.status is QpStatus.INFEASIBLE
        assert set(sol.violating_rows) == {0, 1}

    def test_worked_condition(self):
        # agent 2's condition at the example state with the neighbour at rest
        p = qp(2 * np.eye(1), [0.0], [[-4.25]], [-5.0])
        sol = solve_qp(p)
        assert sol.z == pytest.approx([-5.0 / 4.25])

    def test_no_constraints(self):
        sol = solve_qp(qp(2 * np.eye(3), [2.0, -4.0, 0.0], np.zeros((0, 3)), []))
        assert sol.z == pytest.approx([-1.0, 2.0, 0.0])
        assert sol.multipliers.shape == (0,)

    def test_empty_problem(self):
        sol = solve_qp(qp(np.zeros((0, 0)), np.zeros(0), np.zeros((2, 0)), [1.0, 0.0]))
        assert sol.optimal and sol.z.shape == (0,)

    def test_constant_row_infeasible(self):
        sol = solve_qp(qp(np.eye(2), [0.0, 0.0], [[0.0, 0.0]], [-1.0]))
        assert sol.status is QpStatus.INFEASIBLE and sol.violating_rows == (0,)

    def test_two_dim_corner(self):
        # min |z - (2, 2)|^2 s.t. z1 <= 1, z2 <= 1
        p = qp(2 * np.eye(2), [-4.0, -4.0], [[-1.0, 0.0], [0.0, -1.0]], [1.0, 1.0])
        sol = solve_qp(p)
        assert sol.z == pytest.approx([1.0, 1.0])
        assert sol.multipliers == pytest.approx([2.0, 2.0])
        assert sorted(sol.active) == [0, 1]

    def test_halfplane_projection(self):
        p = qp(2 * np.eye(2), [0.0, 0.0], [[1.0, 1.0]], [-2.0])
        sol = solve_qp(p)
        assert sol.z == pytest.approx([1.0, 1.0])

    def test_infeasible_pair(self):
        p = qp(np.eye(2), [0.0, 0.0], [[1.0, 1.0], [-1.0, -1.0]], [-2.0, 1.0])
        sol = solve_qp(p)
        assert sol.status is QpStatus.INFEASIBLE
        assert sol.violating_rows

    def test_linear_program(self):
        # min -z1 s.t. 0 <= z1 <= 3
        p = qp([[0.0]], [-1.0], [[1.0], [-1.0]], [0.0, 3.0])
        sol = solve_qp(p)
        assert sol.optimal and sol.z == pytest.approx([3.0])
        assert sol.multipliers == pytest.approx([0.0, 1.0])

    def test_unbounded(self):
        sol = solve_qp(qp([[0.0]], [-1.0], [[1.0]], [0.0]))
        assert sol.status is QpStatus.UNBOUNDED

    def test_degenerate_duplicate_rows(self):
        A = np.array([[1.0, 0.0], [1.0, 0.0], [2.0, 0.0]])
        p = qp(2 * np.eye(2), [4.0, 0.0], A, [-1.0, -1.0, -2.0])
        sol = solve_qp(p)
        assert sol.z == pytest.approx([1.0, 0.0])
        assert_kkt(p, sol)


class TestValidation:
    def test_nonsymmetric(self):
        with pytest.raises(ValueError):
            qp([[1.0, 1.0], [0.0, 1.0]], [0, 0], np.zeros((0, 2)), [])

    def test_indefinite(self):
        with pytest.raises(ValueError):
            qp([[1.0, 0.0], [0.0, -1.0]], [0, 0], np.zeros((0, 2)), [])

    def test_nonfinite(self):
        with pytest.raises(ValueError):
            qp([[1.0]], [np.nan], [[1.0]], [0.0])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            qp(np.eye(2), [0.0, 0.0], [[1.0, 0.0]], [0.0, 1.0])


class TestAgainstEnumeration:
    def test_random_batch(self):
        rng = np.random.default_rng(7)
        for _ in range(300):
            H, f, A, c = random_feasible_qp(rng)
            p = qp(H, f, A, c)
            sol = solve_qp(p)
            ref = enumerate_qp(H, f, A, c)
            assert sol.optimal
            assert_kkt(p, sol)
            assert p.objective(sol.z) == pytest.approx(ref[0], rel=1e-7, abs=1e-8)

    def test_semidefinite_batch(self):
        rng = np.random.default_rng(8)
        for _ in range(100):
            d = int(rng.integers(2, 5))
            H, f, A, c = random_feasible_qp(rng, d=d, m=2 * d + 2, pd=False)
            # box the problem so a singular hessian stays bounded
            A = np.vstack([A, np.eye(d), -np.eye(d)])
            c = np.concatenate([c, 10 * np.ones(2 * d)])
            p = qp(H, f, A, c)
            sol = solve_qp(p)
            assert sol.optimal
            assert_kkt(p, sol, tol=1e-7)

    def test_warm_start_matches_cold(self):
        rng = np.random.default_rng(9)
        for _ in range(100):
            H, f, A, c = random_feasible_qp(rng)
            p = qp(H, f, A, c)
            cold = solve_qp(p)
            p2 = qp(H, f + 0.01 * rng.normal(size=f.size), A, c)
            warm = solve_qp(p2, z0=cold.z, warm_active=cold.active)
            again = solve_qp(p2)
            assert p2.objective(warm.z) == pytest.approx(p2.objective(again.z), rel=1e-8, abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_kkt_property(seed):
    rng = np.random.default_rng(seed)
    H, f, A, c = random_feasible_qp(rng)
    p = qp(H, f, A, c)
    sol = solve_qp(p)
    assert sol.optimal
    assert_kkt(p, sol)


def test_format_qp():
    p = qp(2 * np.eye(1), [0.5], [[-4.25]], [-5.0])
    text = format_qp(p, ["agent2"])
    assert text.splitlines()[0] == "dim 1 rows 1"
    assert "agent2: -4.25 | -5" in text
