"""Scenario builders shared by the test modules."""

from __future__ import annotations

import numpy as np

from ccbf.barrier import BarrierFunction, VirtualController
from ccbf.centralized import assemble_centralized
from ccbf.consensus import LocalInfeasible, init_consensus, run_consensus_round
from ccbf.dynamics import FormationParams, formation_agent
from ccbf.model import AgentModel, System
from ccbf.qp import solve_qp
from ccbf.topology import CouplingGraph

X0 = np.array([-0.3, 0.3])


def two_agent(controller=None, etas=(1.0, 1.0), agent1_barrier=True, agent2_controlled=True, gamma=10.0):
    """The two-agent formation example: xi = 2.5, offset 1.4, ball radius 0.5, alpha = beta = 10."""
    controller = controller or VirtualController.zero()
    g = CouplingGraph.complete(2)
    p = FormationParams(2.5, (np.array([0.0]), np.array([1.4])))
    bar = BarrierFunction.ball(0.5, 10.0, 10.0, gamma)
    a1 = AgentModel(formation_agent(p, g, 1), bar if agent1_barrier else None, controller, eta=etas[0])
    a2 = AgentModel(formation_agent(p, g, 2, controlled=agent2_controlled), bar, controller if agent2_controlled else VirtualController.zero(), eta=etas[1])
    return System(g, [a1, a2])


def random_graph(rng, n):
    edges = set()
    for i in range(1, n + 1):
        for j in range(1, n + 1):
            if i != j and rng.random() < 0.6:
                edges.add((i, j))
    return CouplingGraph.from_edges(n, edges)


def random_system(rng, n=None, controller=None, dim=1):
    """Random formation system in which every agent is controlled and carries a ball barrier."""
    n = n or int(rng.integers(1, 5))
    g = random_graph(rng, n)
    desired = tuple(rng.uniform(-2, 2, dim) for _ in range(n))
    p = FormationParams(float(rng.uniform(0.5, 3.0)), desired)
    agents = []
    for i in range(1, n + 1):
        ctrl = controller or (VirtualController.half_sontag() if rng.random() < 0.5 else VirtualController.zero())
        bar = BarrierFunction.ball(float(rng.uniform(0.5, 1.5)), float(rng.uniform(1, 10)), float(rng.uniform(1, 10)), float(rng.uniform(1, 10)))
        u_nom = rng.uniform(-2, 2, dim)
        agents.append(AgentModel(formation_agent(p, g, i), bar, ctrl, u_nom, eta=float(rng.uniform(0.5, 2))))
    system = System(g, agents)
    x = np.concatenate([rng.uniform(-0.9, 0.9, dim) * agents[i].barrier.radius for i in range(n)])
    return system, x


def random_feasible_scenario(rng, n=None, controller=None, tries=200):
    """Random system and state whose centralized problem and zero-seeded local problems are all feasible."""
    for _ in range(tries):
        system, x = random_system(rng, n, controller)
        if not solve_qp(assemble_centralized(system, x)).optimal:
            continue
        try:
            run_consensus_round(system, x, None, init_consensus(system), 1)
        except LocalInfeasible:
            continue
        return system, x
    raise RuntimeError("no feasible scenario found")


def is_regular(system, x, tol=1e-8):
    """Whether no agent has more active local rows at the centralized optimum than inputs.

    Local rows of agent ``i`` are its shares of the coupled conditions it enters
    and its own first-order row. With more active rows than inputs the local
    multipliers are not unique there (linear independence fails), which is the
    regime where the multiplier consensus can stall.
    """
    from ccbf.conditions import assemble_all

    coeffs = assemble_all(system, x)
    p = assemble_centralized(system, x, coeffs=coeffs)
    sol = solve_qp(p)
    owners = sorted(coeffs)
    slack = p.slack(sol.z)
    act_psi = {j for r, j in enumerate(owners) if slack[r] < tol}
    act_fo = {j for r, j in enumerate(owners) if slack[len(owners) + r] < tol}
    for a in system.agents:
        i = a.index
        n_act = sum(1 for j in act_psi if i in coeffs[j].a) + (i in act_fo)
        if n_act > a.input_dim:
            return False
    return True


def is_coupled(system):
    return any(i != j for i, j in system.graph.edges)


def random_regular_scenarios(seed, count=50, coupled=False):
    """``count`` random feasible scenarios (n <= 4, scalar inputs) passing ``is_regular``.

    With ``coupled`` only systems with at least one edge between distinct agents are kept.
    """
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < count:
        system, x = random_feasible_scenario(rng)
        if coupled and not is_coupled(system):
            continue
        if is_regular(system, x):
            out.append((system, x))
    return out
