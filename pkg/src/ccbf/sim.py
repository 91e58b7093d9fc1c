"""Two-timescale closed-loop simulation and trace handling.

Each control step assembles the coupled conditions at the measured state,
computes inputs with the configured filter, holds them over the step and
integrates the coupled dynamics.
"""

from __future__ import annotations

import csv
import enum
import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ccbf.altruism import H_FLOOR, DegenerateRow, altruism_rows, u_min_metric
from ccbf.centralized import assemble_centralized
from ccbf.conditions import CcbfCoefficients, assemble_all, eval_psi
from ccbf.consensus import ConsensusState, LocalInfeasible, init_consensus, rebalance_aux, run_consensus_round
from ccbf.model import System
from ccbf.qp import QpStatus, QuadraticProgram, solve_qp

__all__ = [
    "Mode",
    "Integrator",
    "SimConfig",
    "SimTrace",
    "SimulationError",
    "Infeasible",
    "InvarianceReport",
    "step_rk4",
    "step_euler",
    "run_scenario",
    "check_forward_invariance",
]

log = logging.getLogger(__name__)

Array = np.ndarray


class Mode(str, enum.Enum):
    NO_INTERVENTION = "no_intervention"
    CCBF_SINGLE = "ccbf_single"
    DISTRIBUTED_BASE = "distributed_base"
    DISTRIBUTED_ALTRUISTIC = "distributed_altruistic"
    CENTRALIZED = "centralized"


class Integrator(str, enum.Enum):
    RK4 = "rk4"
    EULER = "euler"


class SimulationError(RuntimeError):
    """Run aborted; ``time`` is the simulation time of the failure."""

    def __init__(self, message: str, time: float) -> None:
        super().__init__(f"t={time:.6g}: {message}")
        self.time = time


class Infeasible(SimulationError):
    """The configured safety filter had no solution at some control step."""

    def __init__(self, message: str, time: float, agent: int | None = None) -> None:
        super().__init__(message, time)
        self.agent = agent


@dataclass(frozen=True)
class SimConfig:
    """Run parameters.

    ``rounds`` is the consensus budget per control step; ``first_rounds``
    (defaults to ``rounds``) applies to the very first step where the
    auxiliary variables start from zero. ``protected`` lists the agents whose
    conditions are enforced in ``CCBF_SINGLE`` mode (default: barrier agents
    without an input of their own).
    """

    horizon: float = 1.0
    control_dt: float = 1e-3
    integrator: Integrator = Integrator.RK4
    mode: Mode = Mode.DISTRIBUTED_BASE
    rounds: int = 20
    first_rounds: int | None = None
    k0: float = 5.0
    inner_dt: float = 0.01
    h_floor: float = H_FLOOR
    protected: tuple[int, ...] | None = None
    record_rounds: bool = False
    altruism_reference: str = "nominal"

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", Mode(self.mode))
        object.__setattr__(self, "integrator", Integrator(self.integrator))
        if not self.control_dt > 0:
            raise ValueError("control_dt must be positive")
        if not self.horizon >= self.control_dt:
            raise ValueError("horizon must be at least one control step")
        if self.rounds < 1:
            raise ValueError("rounds must be at least 1")
        if self.altruism_reference not in ("nominal", "baseline"):
            raise ValueError("altruism_reference must be 'nominal' or 'baseline'")

    @property
    def steps(self) -> int:
        return int(round(self.horizon / self.control_dt))


@dataclass
class SimTrace:
    """Time series at control-step resolution (one row per control step, last row at the horizon).

    ``u`` rows hold the stacked inputs of the controlled agents. ``h``,
    ``hplus`` and ``psi`` are keyed by barrier agent. ``u2_min`` is present
    only for the two-agent scalar example.
    """

    system: System
    mode: Mode
    t: Array
    x: Array
    u: Array
    h: dict[int, Array]
    hplus: dict[int, Array]
    psi: dict[int, Array]
    disagreement: Array | None = None
    rounds: Array | None = None
    u2_min: Array | None = None
    u2_upper: Array | None = None
    round_log: list[tuple[int, int, float, tuple[float, ...]]] = field(default_factory=list)

    def columns(self) -> list[str]:
        """Column names in the documented order."""
        cols = ["t"]
        for a in self.system.agents:
            cols += _names("x", a.index, a.state_dim)
        for a in self.system.agents:
            cols += _names("u", a.index, a.input_dim)
        cols += [f"h_{i}" for i in sorted(self.h)]
        cols += [f"hplus_{i}" for i in sorted(self.hplus)]
        cols += [f"psi_{i}" for i in sorted(self.psi)]
        if self.disagreement is not None:
            cols.append("disagreement")
        if self.u2_min is not None:
            cols.append("u2_min")
        return cols

    def table(self) -> Array:
        parts = [self.t[:, None], self.x, self.u]
        parts += [self.h[i][:, None] for i in sorted(self.h)]
        parts += [self.hplus[i][:, None] for i in sorted(self.hplus)]
        parts += [self.psi[i][:, None] for i in sorted(self.psi)]
        if self.disagreement is not None:
            parts.append(self.disagreement[:, None])
        if self.u2_min is not None:
            parts.append(self.u2_min[:, None])
        return np.hstack(parts)

    def column(self, name: str) -> Array:
        return self.table()[:, self.columns().index(name)]

    def state(self, i: int) -> Array:
        """Trajectory of agent ``i``'s state, shape ``(steps + 1, N_i)``."""
        return np.stack([self.system.split(row)[i - 1] for row in self.x])

    def inputs(self, i: int) -> Array:
        sl = self.system.input_slices()[i]
        return self.u[:, sl]

    def write_csv(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.columns())
            for row in self.table():
                w.writerow([repr(float(v)) for v in row])

    def write_rounds_csv(self, path: str | Path) -> None:
        """Per-round consensus diagnostics: step, round, disagreement, stacked inputs."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        ucols = [c for a in self.system.agents for c in _names("u", a.index, a.input_dim)]
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "round", "disagreement", *ucols])
            for step, rnd, dis, u in self.round_log:
                w.writerow([step, rnd, repr(dis), *(repr(v) for v in u)])


def read_csv(path: str | Path) -> dict[str, Array]:
    """Load a trace CSV into a column-name -> array mapping."""
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], np.array(rows[1:], dtype=float).reshape(len(rows) - 1, len(rows[0]))
    return {name: body[:, k] for k, name in enumerate(header)}


def _names(prefix: str, i: int, dim: int) -> list[str]:
    if dim == 1:
        return [f"{prefix}_{i}"]
    return [f"{prefix}_{i}_{k + 1}" for k in range(dim)]


def step_rk4(system: System, x: Array, u: Sequence[Array], dt: float) -> Array:
    """Classical Runge-Kutta step with inputs held constant over ``dt``."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    k1 = system.xdot(x, u)
    k2 = system.xdot(x + 0.5 * dt * k1, u)
    k3 = system.xdot(x + 0.5 * dt * k2, u)
    k4 = system.xdot(x + dt * k3, u)
    return x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def step_euler(system: System, x: Array, u: Sequence[Array], dt: float) -> Array:
    if dt <= 0:
        raise ValueError("dt must be positive")
    return x + dt * system.xdot(x, u)


def _project_single(system: System, u0: Array, coeffs: dict[int, CcbfCoefficients], protected: Sequence[int], t: float) -> Array:
    """Minimum-deviation stacked input meeting the protected agents' conditions."""
    sl = system.input_slices()
    d = u0.shape[0]
    A = np.zeros((len(protected), d))
    c = np.zeros(len(protected))
    for r, p in enumerate(protected):
        for j, a in coeffs[p].a.items():
            A[r, sl[j]] += a
            c[r] += coeffs[p].b[j]
    if len(protected) == 1:
        margin = float(A[0] @ u0 + c[0])
        if margin >= 0:
            return u0
        nrm = float(A[0] @ A[0])
        if nrm < 1e-18:
            raise Infeasible(f"no input enters the condition of agent {protected[0]}", t, protected[0])
        return u0 - margin * A[0] / nrm
    sol = solve_qp(QuadraticProgram(2 * np.eye(d), -2 * u0, A, c), z0=u0)
    if sol.status is not QpStatus.OPTIMAL:
        raise Infeasible("protected conditions admit no input", t)
    return sol.z


def _two_agent_scalar(system: System) -> bool:
    if system.n != 2:
        return False
    a1, a2 = system.agents
    return a2.barrier is not None and a1.input_dim == 1 and a2.input_dim == 1 and a2.state_dim == 1


def run_scenario(cfg: SimConfig, system: System, x0: Array) -> SimTrace:
    """Simulate ``system`` from ``x0`` under ``cfg``.

    Raises:
        Infeasible: when the configured filter has no solution at a step.
        SimulationError: when the state becomes non-finite.
    """
    x = np.asarray(x0, dtype=float).copy()
    if x.shape != (system.state_dim,):
        raise ValueError(f"initial state has shape {x.shape}, expected ({system.state_dim},)")
    steps = cfg.steps
    bar = system.barrier_agents()
    distributed = cfg.mode in (Mode.DISTRIBUTED_BASE, Mode.DISTRIBUTED_ALTRUISTIC)
    protected = list(cfg.protected) if cfg.protected is not None else [i for i in bar if system.agent(i).input_dim == 0]
    if cfg.mode is Mode.CCBF_SINGLE and not protected:
        raise ValueError("ccbf_single mode needs at least one protected agent")
    u_nom = system.nominal_inputs()
    u0 = system.stack_inputs(u_nom)
    track_umin = _two_agent_scalar(system)

    ts = np.zeros(steps + 1)
    xs = np.zeros((steps + 1, system.state_dim))
    us = np.zeros((steps + 1, u0.shape[0]))
    hs = {i: np.zeros(steps + 1) for i in bar}
    hps = {i: np.zeros(steps + 1) for i in bar}
    psis = {i: np.zeros(steps + 1) for i in bar}
    dis = np.zeros(steps + 1) if distributed else None
    nrounds = np.zeros(steps + 1, dtype=int) if distributed else None
    umin = np.zeros(steps + 1) if track_umin else None
    uup = np.zeros(steps + 1, dtype=bool) if track_umin else None
    round_log: list[tuple[int, int, float, tuple[float, ...]]] = []

    cs: ConsensusState | None = init_consensus(system, cfg.k0, cfg.inner_dt) if distributed else None
    ref_cs = cs
    by_baseline = cfg.mode is Mode.DISTRIBUTED_ALTRUISTIC and cfg.altruism_reference == "baseline"
    for k in range(steps + 1):
        t = k * cfg.control_dt
        coeffs = assemble_all(system, x)

        if cfg.mode is Mode.NO_INTERVENTION:
            z = u0.copy()
        elif cfg.mode is Mode.CCBF_SINGLE:
            z = _project_single(system, u0, coeffs, protected, t)
        elif cfg.mode is Mode.CENTRALIZED:
            sol = solve_qp(assemble_centralized(system, x, u_nom, coeffs))
            if sol.status is not QpStatus.OPTIMAL:
                raise Infeasible(f"centralized problem is {sol.status.value} (rows {sol.violating_rows})", t)
            z = sol.z
        else:
            extra = altruism_rows(system, x, coeffs, cfg.h_floor) if cfg.mode is Mode.DISTRIBUTED_ALTRUISTIC else None
            budget = cfg.first_rounds if (k == 0 and cfg.first_rounds) else cfg.rounds
            u_prev = system.unstack_inputs(us[k - 1]) if k else None
            u_ref = u_nom
            if by_baseline:
                base = _consensus_step(system, x, u_nom, ref_cs, u_prev, budget, coeffs, None, t, False)
                ref_cs, u_ref = base.state, base.u
            res = _consensus_step(system, x, u_ref, cs, u_prev, budget, coeffs, extra, t, cfg.record_rounds)  # type: ignore[arg-type]
            cs = res.state
            z = system.stack_inputs(res.u)
            dis[k] = res.disagreement  # type: ignore[index]
            nrounds[k] = res.rounds  # type: ignore[index]
            if cfg.record_rounds:
                round_log += [(k, rec.round, rec.disagreement, tuple(float(v) for v in np.concatenate(rec.u))) for rec in res.history]

        u = system.unstack_inputs(z)
        ts[k], xs[k], us[k] = t, x, z
        for i in bar:
            hs[i][k] = coeffs[i].h
            hps[i][k] = coeffs[i].h_plus
            psis[i][k] = eval_psi(coeffs[i], u)
        if track_umin:
            try:
                um = u_min_metric(coeffs[2], u[0])
                umin[k], uup[k] = um.value, um.upper  # type: ignore[index]
            except DegenerateRow:
                umin[k], uup[k] = math.nan, False  # type: ignore[index]

        if k < steps:
            step = step_rk4 if cfg.integrator is Integrator.RK4 else step_euler
            x = step(system, x, u, cfg.control_dt)
            if not np.all(np.isfinite(x)):
                raise SimulationError("state became non-finite", t + cfg.control_dt)

    return SimTrace(system, cfg.mode, ts, xs, us, hs, hps, psis, dis, nrounds, umin, uup, round_log)


def _consensus_step(system, x, u_nom, cs, u_prev, budget, coeffs, extra, t, record):
    """Consensus rounds of one control step.

    Starts from the previous step's auxiliary variables. If some local problem
    is infeasible there, re-seeds them by splitting the margins at the
    previous inputs evenly, and finally restarts from zero.
    """
    seeds = [("warm", cs)]
    if u_prev is not None:
        seeds.append(("rebalanced", rebalance_aux(cs, system, coeffs, u_prev)))
    seeds.append(("zero", init_consensus(system, cs.k0, cs.inner_dt)))
    err: LocalInfeasible | None = None
    for name, seed in seeds:
        try:
            return run_consensus_round(system, x, u_nom, seed, budget, coeffs, extra, record=record)
        except LocalInfeasible as exc:
            log.debug("t=%g: %s auxiliary variables infeasible", t, name)
            err = exc
    raise Infeasible(str(err), t, err.agent) from err


@dataclass(frozen=True)
class AgentInvariance:
    agent: int
    min_h: float
    min_hplus: float
    first_violation: float | None


@dataclass(frozen=True)
class InvarianceReport:
    tol: float
    agents: dict[int, AgentInvariance]

    @property
    def ok(self) -> bool:
        return all(a.first_violation is None for a in self.agents.values())


def check_forward_invariance(trace: SimTrace, tol: float = 1e-4) -> InvarianceReport:
    """Per-agent minimum of ``h`` and ``h^+`` and the first time ``h < -tol``."""
    out = {}
    for i in sorted(trace.h):
        h = trace.h[i]
        bad = np.flatnonzero(h < -tol)
        out[i] = AgentInvariance(
            i,
            float(h.min()),
            float(trace.hplus[i].min()),
            float(trace.t[bad[0]]) if bad.size else None,
        )
    return InvarianceReport(tol, out)
