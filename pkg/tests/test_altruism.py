import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ccbf.altruism import (
    H_FLOOR,
    DegenerateRow,
    SafetyWeights,
    ZeroWeight,
    altruism_row,
    altruism_rows,
    compute_relatedness,
    compute_weight,
    safety_benefit,
    safety_cost,
    safety_weights,
    solve_local_altruistic,
    u_min_metric,
)
from ccbf.conditions import CcbfCoefficients, assemble_all, assemble_coefficients
from ccbf.consensus import init_consensus
from helpers import X0, random_system, two_agent

ETAS = (1.0, 1000.0)


class TestWeights:
    def test_example(self):
        w = safety_weights(two_agent(etas=ETAS), X0)
        assert w.w[1] == pytest.approx(12.5)
        assert w.w[2] == pytest.approx(12500.0)
        assert compute_relatedness(w, 1, 2) == pytest.approx(1000.0)
        assert compute_relatedness(w, 2, 1) == pytest.approx(1e-3)
        assert compute_relatedness(w, 2, 2) == 1.0

    def test_floor(self):
        assert compute_weight(1.0, 0.0) == pytest.approx(1.0 / H_FLOOR)
        assert compute_weight(1.0, -0.2) == pytest.approx(1.0 / H_FLOOR)
        assert compute_weight(2.0, 0.0, floor=0.5) == pytest.approx(4.0)

    @pytest.mark.parametrize("args", [(-1.0, 0.1), (1.0, 0.1, 0.0)])
    def test_validation(self, args):
        with pytest.raises(ValueError):
            compute_weight(*args)

    def test_zero_weight(self):
        w = SafetyWeights({1: 0.0, 2: 1.0}, {1: 0.0, 2: 5.0})
        with pytest.raises(ZeroWeight):
            compute_relatedness(w, 1, 2)
        assert compute_relatedness(w, 2, 1) == 0.0

    @settings(max_examples=100, deadline=None)
    @given(st.floats(0.1, 10), st.floats(1e-3, 1.0), st.floats(1e-3, 1.0))
    def test_weight_grows_near_boundary(self, eta, h1, h2):
        lo, hi = sorted((h1, h2))
        assert compute_weight(eta, lo) >= compute_weight(eta, hi)


class TestCostBenefit:
    def test_example(self):
        c2 = assemble_coefficients(2, two_agent(), X0)
        assert safety_cost(c2, np.zeros(1)) == pytest.approx(6.5)
        assert safety_benefit(c2, 1, np.array([-4.0])) == pytest.approx(4.5)

    def test_benefit_needs_participant(self):
        s = two_agent()
        c = assemble_coefficients(2, s, X0)
        with pytest.raises(ValueError):
            safety_benefit(c, 3, np.zeros(1))

    def test_u_min(self):
        c2 = assemble_coefficients(2, two_agent(), X0)
        m = u_min_metric(c2, 0.0)
        assert m.value == pytest.approx(-1.17647, abs=1e-5)
        assert m.upper

    def test_u_min_degenerate(self):
        c2 = CcbfCoefficients(2, {1: np.array([-0.75]), 2: np.array([1e-14])}, {1: 1.5, 2: -6.5}, 0.08, 0.2)
        with pytest.raises(DegenerateRow):
            u_min_metric(c2, 0.0)


class TestRows:
    def test_example_rows(self):
        s = two_agent(etas=ETAS)
        rows = altruism_rows(s, X0, assemble_all(s, X0))
        (row1, off1), = rows[1]
        (row2, off2), = rows[2]
        assert row1 == pytest.approx([-745.75])
        assert off1 == pytest.approx(1493.5)
        assert row2 == pytest.approx([-4.24925])
        assert off2 == pytest.approx(-6.4985)

    def test_row_needs_relatedness(self):
        coeffs = assemble_all(two_agent(), X0)
        with pytest.raises(ValueError):
            altruism_row(1, coeffs, {})

    def test_agent_without_barrier_has_no_row(self):
        s = two_agent(agent1_barrier=False)
        rows = altruism_rows(s, X0, assemble_all(s, X0))
        assert sorted(rows) == [2]

    def test_hamilton_rule_form(self):
        # row value is sum_j r_ij B_ji(u) - C_i(u): helping weighted peers must cover the own cost
        rng = np.random.default_rng(3)
        for _ in range(50):
            system, x = random_system(rng)
            coeffs = assemble_all(system, x)
            weights = safety_weights(system, x)
            for i, [(row, off)] in altruism_rows(system, x, coeffs).items():
                u = rng.normal(size=system.agent(i).input_dim)
                benefit = sum(
                    compute_relatedness(weights, i, j) * safety_benefit(coeffs[j], i, u)
                    for j in system.graph.out_neighbors(i)
                    if j != i and j in coeffs
                )
                cost = safety_cost(coeffs[i], u) if i in system.graph.out_neighbors(i) else 0.0
                assert float(row @ u) + off == pytest.approx(benefit - cost, rel=1e-9, abs=1e-9)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(1e-3, 1e3))
    def test_relatedness_is_reciprocal(self, eta2):
        w = safety_weights(two_agent(etas=(1.0, eta2)), X0)
        assert compute_relatedness(w, 1, 2) * compute_relatedness(w, 2, 1) == pytest.approx(1.0)

    def test_rows_scale_invariant(self):
        # scaling every eta together leaves relatedness and hence the rows unchanged
        a, b = two_agent(etas=(1.0, 3.0)), two_agent(etas=(7.0, 21.0))
        ra = altruism_rows(a, X0, assemble_all(a, X0))
        rb = altruism_rows(b, X0, assemble_all(b, X0))
        for i in (1, 2):
            assert ra[i][0][0] == pytest.approx(rb[i][0][0])
            assert ra[i][0][1] == pytest.approx(rb[i][0][1])


class TestLocalAltruistic:
    def test_solution_satisfies_row(self):
        s = two_agent(etas=ETAS)
        coeffs = assemble_all(s, X0)
        rows = altruism_rows(s, X0, coeffs)
        cs = init_consensus(s)
        for i in (1, 2):
            sol = solve_local_altruistic(i, s, X0, np.array([1.0]), cs, coeffs)
            (row, off), = rows[i]
            assert float(row @ sol.u) + off >= -1e-9

    def test_altruism_binds_for_donor(self):
        # agent 1 values agent 2 a thousand times more; its row caps u1 below 1493.5 / 745.75
        s = two_agent(etas=ETAS)
        sol = solve_local_altruistic(1, s, X0, np.array([5.0]), init_consensus(s))
        assert sol.u[0] <= 1493.5 / 745.75 + 1e-9
