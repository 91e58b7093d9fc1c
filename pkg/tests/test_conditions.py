import numpy as np
import pytest
import sympy as sp

from ccbf.barrier import BarrierFunction, VirtualController
from ccbf.conditions import (
    assemble_all,
    assemble_coefficients,
    controller_output,
    eval_h_plus,
    eval_half_sontag,
    eval_psi,
    fd_psi_oracle,
    first_order_condition_row,
)
from ccbf.dynamics import AgentDynamics, FormationParams, formation_agent
from ccbf.model import AgentModel, System
from ccbf.topology import CouplingGraph
from helpers import X0, random_system, two_agent

HS = VirtualController.half_sontag()


def symbolic_coefficients(x1, x2, xi=2.5, off=1.4, r=0.5, alpha=10.0, beta=10.0):
    """Coefficients of agent 2's condition by symbolic differentiation (zero controller)."""
    s1, s2, u1, u2 = sp.symbols("x1 x2 u1 u2")
    f1 = -xi * ((s1 - s2) + off)
    f2 = -xi * ((s2 - s1) - off)
    h = (r**2 - s2**2) / 2
    hp = sp.diff(h, s2) * f2 + alpha * h
    psi = sp.diff(hp, s1) * (f1 + u1) + sp.diff(hp, s2) * (f2 + u2) + beta * hp
    psi = sp.expand(psi.subs({s1: x1, s2: x2}))
    a21, a22 = float(psi.coeff(u1)), float(psi.coeff(u2))
    const = float(psi.subs({u1: 0, u2: 0}))
    return a21, a22, const, float(hp.subs({s1: x1, s2: x2}))


class TestHighOrderCandidate:
    def test_example_state(self):
        s = two_agent()
        x_i, nbrs = s.local(X0, 2)
        m = s.agent(2)
        assert eval_h_plus(m.barrier, m.dynamics, m.controller, x_i, nbrs) == pytest.approx(0.2)

    def test_origin_without_drift(self):
        dyn = AgentDynamics(1, 1, 1, lambda x, n: np.zeros(1), lambda x: np.eye(1), lambda x, n: {1: np.zeros((1, 1))})
        b = BarrierFunction.ball(0.5, 10, 10)
        assert eval_h_plus(b, dyn, VirtualController.zero(), np.zeros(1), {}) == pytest.approx(1.25)

    def test_half_sontag_example(self):
        s = two_agent(HS)
        x_i, nbrs = s.local(X0, 2)
        m = s.agent(2)
        k = eval_half_sontag(m.barrier, m.dynamics, x_i, nbrs)
        assert k == pytest.approx([-0.0033580849], rel=1e-7)
        assert eval_h_plus(m.barrier, m.dynamics, HS, x_i, nbrs) == pytest.approx(0.2010074255, rel=1e-9)

    def test_half_sontag_needs_input(self):
        s = two_agent(agent2_controlled=False)
        x_i, nbrs = s.local(X0, 2)
        with pytest.raises(ValueError):
            eval_half_sontag(s.agent(2).barrier, s.agent(2).dynamics, x_i, nbrs)

    def test_half_sontag_positive_candidate(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            system, x = random_system(rng, controller=HS)
            for i in system.barrier_agents():
                m = system.agent(i)
                x_i, nbrs = system.local(x, i)
                lgh = m.barrier.grad(x_i) @ m.dynamics.input_map(x_i)
                if np.linalg.norm(lgh) > 1e-6:
                    assert eval_h_plus(m.barrier, m.dynamics, HS, x_i, nbrs) > 0

    def test_custom_controller_shape_checked(self):
        s = two_agent(VirtualController.custom(lambda x, n: np.zeros(2)))
        x_i, nbrs = s.local(X0, 1)
        m = s.agent(1)
        with pytest.raises(ValueError):
            controller_output(m.barrier, m.dynamics, m.controller, x_i, nbrs)


class TestCoefficients:
    def test_worked_example(self):
        c = assemble_coefficients(2, two_agent(), X0)
        assert c.a[2] == pytest.approx([-4.25])
        assert c.a[1] == pytest.approx([-0.75])
        assert c.b[1] == pytest.approx(1.5)
        assert c.b[2] == pytest.approx(-6.5)
        assert c.h == pytest.approx(0.08)

    @pytest.mark.parametrize("state", [(-0.3, 0.3), (0.1, 0.2), (-0.45, 0.49), (0.3, -0.4)])
    def test_symbolic_oracle(self, state):
        x = np.array(state)
        c = assemble_coefficients(2, two_agent(), x)
        a21, a22, const, hp = symbolic_coefficients(*state)
        assert c.a[1][0] == pytest.approx(a21, abs=1e-12)
        assert c.a[2][0] == pytest.approx(a22, abs=1e-12)
        assert c.b[1] + c.b[2] == pytest.approx(const, abs=1e-12)
        assert c.h_plus == pytest.approx(hp, abs=1e-12)

    def test_without_drift_at_origin(self):
        dyn = AgentDynamics(1, 1, 1, lambda x, n: np.zeros(1), lambda x: np.eye(1), lambda x, n: {1: np.zeros((1, 1))})
        s = System(CouplingGraph(1), [AgentModel(dyn, BarrierFunction.ball(0.5, 10, 3))])
        c = assemble_coefficients(1, s, np.zeros(1))
        assert c.a[1] == pytest.approx([0.0])
        assert c.b[1] == pytest.approx(3 * 10 * 0.125)

    def test_uncontrolled_neighbor_has_empty_row(self):
        c = assemble_coefficients(2, two_agent(agent2_controlled=False), X0)
        assert c.a[2].shape == (0,)
        assert c.a[1].shape == (1,)

    def test_keys_are_in_neighbors(self):
        g = CouplingGraph.chain(3)
        p = FormationParams(1.0, (np.zeros(1), np.ones(1), 2 * np.ones(1)))
        s = System(g, [AgentModel(formation_agent(p, g, i), BarrierFunction.ball(1, 1, 1)) for i in (1, 2, 3)])
        coeffs = assemble_all(s, np.array([0.1, 0.2, 0.3]))
        assert sorted(coeffs[1].a) == [1, 2]
        assert sorted(coeffs[2].a) == [1, 2, 3]

    def test_only_barrier_agents_assembled(self):
        assert sorted(assemble_all(two_agent(agent1_barrier=False), X0)) == [2]


class TestPsi:
    def test_zero_input(self):
        c = assemble_coefficients(2, two_agent(), X0)
        assert eval_psi(c, [np.zeros(1), np.zeros(1)]) == pytest.approx(-5.0)

    def test_neighbor_push(self):
        c = assemble_coefficients(2, two_agent(), X0)
        assert eval_psi(c, {1: np.array([-4.0]), 2: np.zeros(1)}) == pytest.approx(-2.0)
        assert c.neighbor_contribution([np.array([-4.0]), np.zeros(1)]) == pytest.approx(4.5)

    def test_dimension_mismatch(self):
        c = assemble_coefficients(2, two_agent(), X0)
        with pytest.raises(ValueError):
            eval_psi(c, [np.zeros(2), np.zeros(1)])

    def test_oracle_zero_dynamics(self):
        dyn = AgentDynamics(1, 1, 1, lambda x, n: np.zeros(1), lambda x: np.eye(1), lambda x, n: {1: np.zeros((1, 1))})
        s = System(CouplingGraph(1), [AgentModel(dyn, BarrierFunction.ball(0.5, 10, 3))])
        x = np.array([0.2])
        hp = assemble_coefficients(1, s, x).h_plus
        assert fd_psi_oracle(1, s, x, [np.zeros(1)]) == pytest.approx(3 * hp, rel=1e-12)

    @pytest.mark.parametrize("ctrl", [VirtualController.zero(), HS], ids=["zero", "half_sontag"])
    def test_oracle_example(self, ctrl):
        s = two_agent(ctrl)
        u = [np.array([0.7]), np.array([-1.1])]
        for i in (1, 2):
            exact = eval_psi(assemble_coefficients(i, s, X0), u)
            assert exact == pytest.approx(fd_psi_oracle(i, s, X0, u), rel=1e-6)

    def test_oracle_random(self):
        rng = np.random.default_rng(11)
        worst = 0.0
        for _ in range(100):
            system, x = random_system(rng)
            u = [rng.normal(size=a.input_dim) for a in system.agents]
            for i, c in assemble_all(system, x).items():
                exact = eval_psi(c, u)
                worst = max(worst, abs(exact - fd_psi_oracle(i, system, x, u)) / (1 + abs(exact)))
        assert worst <= 1e-3

    def test_oracle_custom_controller(self):
        ctrl = VirtualController.custom(lambda x, n: np.tanh(x + sum(n.values())))
        s = two_agent(ctrl)
        u = [np.array([0.3]), np.array([0.4])]
        for i in (1, 2):
            exact = eval_psi(assemble_coefficients(i, s, X0), u)
            assert exact == pytest.approx(fd_psi_oracle(i, s, X0, u), rel=1e-5)


class TestFirstOrderRow:
    def test_zero_controller(self):
        s = two_agent()
        x_i, nbrs = s.local(X0, 2)
        m = s.agent(2)
        row, off = first_order_condition_row(m.barrier, m.dynamics, m.controller, x_i, nbrs)
        assert row == pytest.approx([-0.3])
        assert off == pytest.approx(10 * 0.08)

    def test_boundary_without_gamma(self):
        s = two_agent(gamma=0.0)
        x = np.array([-0.3, 0.5])
        x_i, nbrs = s.local(x, 2)
        m = s.agent(2)
        row, off = first_order_condition_row(m.barrier, m.dynamics, m.controller, x_i, nbrs)
        assert off == pytest.approx(0.0, abs=1e-15)

    def test_half_sontag(self):
        s = two_agent(HS)
        x_i, nbrs = s.local(X0, 2)
        m = s.agent(2)
        _, off = first_order_condition_row(m.barrier, m.dynamics, m.controller, x_i, nbrs)
        assert off == pytest.approx(0.8 - 0.3 * 0.0033580849, rel=1e-9)
