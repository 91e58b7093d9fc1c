"""Distributed solution of the centralized safety filter.

Every agent ``i`` solves a local QP over its own input. It holds one share
row for each constraint it participates in (each barrier agent ``j`` with
``i in N_j^+``)::

    a_ji^T u_i + sum_{k in N_j^+} (y_i^j - y_k^j) + b_ji >= 0

plus its own first-order row. The auxiliary variables ``y`` are parameters
of the local problems. Between solves they follow a Laplacian flow driven
by the disagreement of the share multipliers ``c_i^j``, integrated by
forward Euler. The sum of a constraint's shares is always ``psi_j``, so
every round's inputs satisfy the centralized constraints whenever all
local problems are feasible. At a fixed point the multipliers agree and
the inputs solve the centralized problem.
"""

from __future__ import annotations

from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field, replace

import numpy as np

from ccbf.centralized import first_order_rows
from ccbf.conditions import CcbfCoefficients, assemble_all
from ccbf.model import System
from ccbf.qp import MaxIterationsError, QuadraticProgram, QpStatus, solve_qp
from ccbf.topology import CouplingGraph

__all__ = [
    "ConsensusState",
    "LocalInfeasible",
    "LocalSolution",
    "RoundRecord",
    "ConsensusResult",
    "init_consensus",
    "solve_local",
    "update_aux",
    "rebalance_aux",
    "run_consensus_round",
    "disagreement",
]

Array = np.ndarray
Row = tuple[Array, float]

#: early-exit threshold on the multiplier disagreement
DISAGREEMENT_TOL = 1e-8
#: rows within this normalized slack count as active when multipliers are re-picked
AMBIGUITY_TOL = 1e-6
#: sufficient-decrease constant of the step acceptance test
ARMIJO = 1e-4


class LocalInfeasible(RuntimeError):
    """An agent's local problem has no solution."""

    def __init__(self, agent: int, message: str = "") -> None:
        super().__init__(message or f"local problem of agent {agent} is infeasible")
        self.agent = agent


@dataclass(frozen=True)
class ConsensusState:
    """Auxiliary variables and last multipliers, keyed ``(participant i, constraint owner j)``."""

    y: dict[tuple[int, int], float]
    c: dict[tuple[int, int], float]
    k0: float = 5.0
    inner_dt: float = 0.01

    def __post_init__(self) -> None:
        if not self.k0 > 0:
            raise ValueError("k0 must be positive")
        if not self.inner_dt > 0:
            raise ValueError("inner_dt must be positive")

    def group(self, j: int) -> list[int]:
        """Participants of constraint ``j``."""
        return sorted(i for (i, jj) in self.y if jj == j)


def init_consensus(system: System, k0: float = 5.0, inner_dt: float = 0.01) -> ConsensusState:
    """Zero auxiliary variables and multipliers for every (participant, barrier agent) pair."""
    keys = [(i, j) for j in system.barrier_agents() for i in system.graph.in_neighbors(j)]
    return ConsensusState({k: 0.0 for k in keys}, {k: 0.0 for k in keys}, k0, inner_dt)


@dataclass(frozen=True)
class LocalSolution:
    u: Array
    c: dict[int, float]
    y: dict[int, float]
    active: tuple[int, ...] = ()
    cost: float = 0.0
    ambiguous: bool = False


def _share_offset(cs: ConsensusState, i: int, j: int) -> float:
    yi = cs.y[(i, j)]
    return sum(yi - cs.y[(k, j)] for k in cs.group(j))


def solve_local(
    i: int,
    system: System,
    x: Array,
    u_nom_i: Array | None,
    cs: ConsensusState,
    coeffs: Mapping[int, CcbfCoefficients] | None = None,
    fo_rows: Mapping[int, Row] | None = None,
    extra_rows: Sequence[Row] = (),
    warm_active: Sequence[int] | None = None,
    targets: Mapping[int, float] | None = None,
    active_tol: float = 0.0,
) -> LocalSolution:
    """Agent ``i``'s local problem at fixed auxiliary variables.

    ``coeffs``/``fo_rows`` may be passed to reuse an assembly already done for
    this state. ``extra_rows`` are appended after the share rows and the
    first-order row (the altruistic variant uses this). ``targets`` maps a
    constraint owner to the peers' multiplier for that constraint; when the
    local multipliers are not unique the valid ones closest to the targets
    are reported. Rows whose slack is at most ``active_tol`` count as active
    for that choice.

    Raises:
        LocalInfeasible: when the share rows and first-order row admit no input.
    """
    model = system.agent(i)
    coeffs = assemble_all(system, x) if coeffs is None else coeffs
    fo_rows = first_order_rows(system, x) if fo_rows is None else fo_rows
    m = model.input_dim
    u0 = model.u_nom if u_nom_i is None else np.atleast_1d(np.asarray(u_nom_i, dtype=float))

    owners = [j for j in system.graph.out_neighbors(i) if j in coeffs]
    rows, offs = [], []
    for j in owners:
        rows.append(coeffs[j].a[i])
        offs.append(coeffs[j].b[i] + _share_offset(cs, i, j))
    if i in fo_rows:
        lgh, off = fo_rows[i]
        rows.append(lgh)
        offs.append(off)
    for row, off in extra_rows:
        rows.append(np.atleast_1d(row))
        offs.append(off)

    A = np.array(rows, dtype=float).reshape(len(rows), m)
    qp = QuadraticProgram(2.0 * np.eye(m), -2.0 * u0, A, np.array(offs, dtype=float))
    sol = solve_qp(qp, z0=u0 if m else None, warm_active=warm_active)
    if sol.status is not QpStatus.OPTIMAL:
        raise LocalInfeasible(i, f"local problem of agent {i} is {sol.status.value} (rows {sol.violating_rows})")
    lam, ambiguous = sol.multipliers, False
    if targets is not None and owners:
        goal = np.array([targets.get(j, 0.0) for j in owners] + [0.0] * (len(offs) - len(owners)))
        lam, ambiguous = _closest_multipliers(qp, sol.z, lam, goal, len(owners), active_tol)
    mult = {j: float(lam[k]) for k, j in enumerate(owners)}
    y = {j: cs.y[(i, j)] for j in owners}
    return LocalSolution(sol.z, mult, y, sol.active, float(np.sum((sol.z - u0) ** 2)), ambiguous)


def _closest_multipliers(
    qp: QuadraticProgram, z: Array, lam: Array, goal: Array, n_share: int, active_tol: float = 0.0
) -> tuple[Array, bool]:
    """Among the multipliers of the nearly active rows at ``z``, those whose share entries are closest to ``goal``.

    Only matters when the nearly active rows are linearly dependent (for a
    scalar input: two bounds that coincide or almost do), so that the
    multipliers are one arbitrary member of a set. Rows within
    ``active_tol`` of their bound are included, which turns the multipliers
    into an approximate subgradient that accounts for rows the next step can
    reach. The flag reports whether the choice changed anything.
    """
    slack = qp.slack(z)
    norms = np.linalg.norm(qp.A, axis=1)
    near = np.maximum(AMBIGUITY_TOL * np.maximum(norms, 1e-12) * (1.0 + np.abs(z).max()), active_tol)
    act = np.flatnonzero(np.abs(slack) <= near)
    if act.size < 2:
        return lam, False
    At = qp.A[act].T
    _, sv, vt = np.linalg.svd(At)
    rank = int((sv > 1e-10 * max(1.0, sv.max())).sum())
    if rank == act.size:
        return lam, False
    N = vt[rank:].T
    # minimize the share-row distance over lam_act + N t >= 0; other rows get a tiny weight
    w = np.where(act < n_share, 1.0, 1e-6)
    base = lam[act]
    H = N.T @ (w[:, None] * N)
    f = N.T @ (w * (base - goal[act]))
    try:
        sub = solve_qp(QuadraticProgram(H + 1e-12 * np.eye(N.shape[1]), f, N, base))
    except MaxIterationsError:
        # the selection is a refinement; the solver's own multipliers remain valid
        return lam, False
    if not sub.optimal:
        return lam, False
    out = lam.copy()
    out[act] = np.maximum(base + N @ sub.z, 0.0)
    return out, bool(np.abs(out - lam).max() > 1e-9 * (1.0 + np.abs(lam).max()))


def update_aux(
    cs: ConsensusState,
    g: CouplingGraph,
    c: Mapping[tuple[int, int], float],
    dt: float | None = None,
    pair_scale: Mapping[tuple[int, int, int], float] | None = None,
) -> ConsensusState:
    """One forward-Euler step of the auxiliary-variable flow.

    ``y_i^j += dt * k0 * sum_{k in N_j^+} (c_i^j - c_k^j)`` with ``dt`` defaulting
    to ``inner_dt``: a participant whose share multiplier exceeds its peers'
    has its share relaxed. The update is a Laplacian flow within each
    constraint group, so the group sum of ``y`` is conserved. Pairs missing
    from ``c`` count as zero.

    ``pair_scale`` damps single exchanges, keyed ``(j, min(i, k), max(i, k))``.
    The scale is symmetric, so the group sum is still conserved.
    """
    dt = cs.inner_dt if dt is None else dt
    scale = pair_scale or {}
    new_y = dict(cs.y)
    cc = {k: float(c.get(k, 0.0)) for k in cs.y}
    for (i, j) in cs.y:
        if i not in g.in_neighbors(j):
            continue
        drive = sum(scale.get((j, min(i, k), max(i, k)), 1.0) * (cc[(i, j)] - cc[(k, j)]) for k in g.in_neighbors(j))
        new_y[(i, j)] = cs.y[(i, j)] + dt * cs.k0 * drive
    return replace(cs, y=new_y, c=cc)


def rebalance_aux(
    cs: ConsensusState, system: System, coeffs: Mapping[int, CcbfCoefficients], u: Sequence[Array]
) -> ConsensusState:
    """Auxiliary variables that split each condition's margin at inputs ``u`` evenly among its participants.

    Every share then equals ``psi_j(u) / |N_j^+|``. Useful to re-seed the
    flow after the state has moved: it keeps ``u`` feasible for the local
    problems whenever it satisfies every coupled condition.
    """
    new_y = dict(cs.y)
    for j in coeffs:
        group = cs.group(j)
        shares = {i: float(coeffs[j].a[i] @ np.atleast_1d(u[i - 1])) + coeffs[j].b[i] if coeffs[j].a[i].size else coeffs[j].b[i] for i in group}
        mean = sum(shares.values()) / len(group)
        for i in group:
            new_y[(i, j)] = (mean - shares[i]) / len(group)
    return replace(cs, y=new_y)


def disagreement(cs_keys: Sequence[tuple[int, int]], c: Mapping[tuple[int, int], float]) -> float:
    """Largest multiplier spread within any constraint group."""
    groups: dict[int, list[float]] = {}
    for (i, j) in cs_keys:
        groups.setdefault(j, []).append(c.get((i, j), 0.0))
    return max((max(v) - min(v) for v in groups.values()), default=0.0)


@dataclass(frozen=True)
class RoundRecord:
    round: int
    disagreement: float
    u: tuple[Array, ...]


@dataclass
class ConsensusResult:
    u: list[Array]
    state: ConsensusState
    disagreement: float
    rounds: int
    history: list[RoundRecord] = field(default_factory=list)


def run_consensus_round(
    system: System,
    x: Array,
    u_nom: Sequence[Array] | None,
    cs: ConsensusState,
    rounds: int,
    coeffs: Mapping[int, CcbfCoefficients] | None = None,
    extra_rows: Mapping[int, Sequence[Row]] | None = None,
    tol: float = DISAGREEMENT_TOL,
    record: bool = False,
    on_round: Callable[[int, list[Array]], None] | None = None,
) -> ConsensusResult:
    """Alternate local solves (all agents) and auxiliary updates.

    Runs at most ``rounds`` rounds and stops early once the multiplier
    disagreement drops to ``tol``. Returns the inputs of the last feasible
    round together with the auxiliary variables that produced them (and that
    round's multipliers), ready to warm-start the next call.

    The flow is gradient descent on the sum of the local optimal costs (the
    derivative of that sum with respect to agent ``i``'s share offset in
    constraint ``j`` is ``-c_i^j``), and that sum is infinite wherever a local
    problem is infeasible. Each Euler step is therefore accepted only if it
    lowers the summed cost by a sufficient amount. A step that leaves some
    agent's problem infeasible is retried with the exchanges that tighten
    that agent's shares halved, which lets the rest of the flow proceed when
    an agent's feasible set has shrunk to a point; a step that does not
    decrease the cost enough is retried with half the step. Step and
    exchange scales double back after every accepted step, so
    well-conditioned problems run the plain Euler flow. Every sweep of
    local solves counts as a round.

    Raises:
        LocalInfeasible: if a local problem is infeasible at the incoming ``y``.
    """
    if rounds < 1:
        raise ValueError("rounds must be at least 1")
    coeffs = assemble_all(system, x) if coeffs is None else coeffs
    fo = first_order_rows(system, x)
    u_nom = system.nominal_inputs() if u_nom is None else list(u_nom)
    extra_rows = extra_rows or {}
    history: list[RoundRecord] = []
    warm: dict[int, tuple[int, ...]] = {}
    keys = list(cs.y)
    pairs = _exchange_pairs(keys)
    max_group = max(pairs.values(), default=1)

    def peer_mean(i: int, prev: Mapping[tuple[int, int], float]) -> dict[int, float]:
        out = {}
        for (p, j) in keys:
            if p == i:
                peers = [prev.get((k, j), 0.0) for (k, jj) in keys if jj == j and k != i]
                out[j] = sum(peers) / len(peers) if peers else prev.get((i, j), 0.0)
        return out

    def reach(prev: Mapping[tuple[int, int], float], step: float) -> float:
        # largest share-offset change one flow step of this size can make
        return step * cs.k0 * max_group * disagreement(keys, prev) * max_group

    def solve_all(
        state: ConsensusState, step: float, refine: bool = True
    ) -> tuple[list[Array], dict[tuple[int, int], float], float]:
        nonlocal r
        r += 1
        u, c, cost, ambiguous = [], {}, 0.0, False
        for a in system.agents:
            i = a.index
            sol = solve_local(
                i,
                system,
                x,
                u_nom[i - 1],
                state,
                coeffs,
                fo,
                extra_rows.get(i, ()),
                warm.get(i),
                peer_mean(i, state.c),
                reach(state.c, step),
            )
            warm[i] = sol.active
            u.append(sol.u)
            cost += sol.cost
            ambiguous |= sol.ambiguous
            for j, v in sol.c.items():
                c[(i, j)] = v
        if ambiguous and refine and r < rounds:
            # re-pick the non-unique multipliers against this sweep's peers
            return solve_all(replace(state, c=c), step, refine=False)
        return u, c, cost

    r = 0
    dt = cs.inner_dt
    u, c, cost = solve_all(cs, dt)
    dis = disagreement(keys, c)
    scale: dict[tuple[int, int, int], float] = {}
    while True:
        if record:
            history.append(RoundRecord(r, dis, tuple(v.copy() for v in u)))
        if on_round is not None:
            on_round(r, u)
        if dis <= tol or r >= rounds:
            return ConsensusResult(u, replace(cs, c=dict(c)), dis, r, history)
        while True:
            # predicted decrease of the summed local cost along the damped flow
            rate = sum(size * scale.get(p, 1.0) * (c[(p[1], p[0])] - c[(p[2], p[0])]) ** 2 for p, size in pairs.items())
            trial = update_aux(cs, system.graph, c, dt, scale)
            try:
                u_new, c_new, cost_new = solve_all(trial, dt)
                if cost_new <= cost - ARMIJO * dt * cs.k0 * rate + 1e-12 * (1.0 + cost):
                    break
                dt *= 0.5
            except LocalInfeasible as err:
                if not _damp_tightening(scale, pairs, c, err.agent):
                    dt *= 0.5
            if r >= rounds:
                return ConsensusResult(u, replace(cs, c=dict(c)), dis, r, history)
        cs, u, c, cost = trial, u_new, c_new, cost_new
        dis = disagreement(keys, c)
        dt = min(2.0 * dt, cs.inner_dt)
        for p in scale:
            scale[p] = min(2.0 * scale[p], 1.0)


def _exchange_pairs(keys: Sequence[tuple[int, int]]) -> dict[tuple[int, int, int], int]:
    """Every exchange ``(j, i, k)`` with ``i < k`` in group ``j``, mapped to the group size."""
    groups: dict[int, list[int]] = {}
    for (i, j) in keys:
        groups.setdefault(j, []).append(i)
    return {(j, i, k): len(members) for j, members in groups.items() for i in members for k in members if i < k}


def _damp_tightening(
    scale: dict[tuple[int, int, int], float],
    pairs: Mapping[tuple[int, int, int], int],
    c: Mapping[tuple[int, int], float],
    agent: int,
) -> bool:
    """Halve every exchange that tightens one of ``agent``'s shares; False if there is none."""
    changed = False
    for (j, i, k) in pairs:
        if agent == i and c[(i, j)] < c[(k, j)] or agent == k and c[(k, j)] < c[(i, j)]:
            scale[(j, i, k)] = 0.5 * scale.get((j, i, k), 1.0)
            changed = True
    return changed
