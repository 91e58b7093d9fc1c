"""Scenario files: strict YAML schema, validation, serialization and model building.

A scenario bundles the coupling graph, formation dynamics, per-agent safety
and controller settings, solver parameters and simulation parameters. See
``docs/schema.md`` for the format.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Annotated, Literal

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, NonNegativeFloat, PositiveFloat, PositiveInt
from pydantic import ValidationError as PydanticValidationError

from ccbf.barrier import BarrierFunction, ControllerKind, VirtualController
from ccbf.dynamics import FormationParams, formation_agent
from ccbf.model import AgentModel, System
from ccbf.sim import Integrator, Mode, SimConfig
from ccbf.topology import CouplingGraph

__all__ = [
    "SCHEMA_VERSION",
    "ScenarioFile",
    "ParseError",
    "ScenarioValidationError",
    "FieldError",
    "parse_scenario",
    "load_scenario",
    "dump_scenario",
    "build_system",
    "sim_config",
    "bundled_scenario",
    "BUNDLED",
]

SCHEMA_VERSION = 1
BUNDLED = ("fig1", "fig2", "fig3")


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", strict=True, frozen=True)


class BarrierSpec(_Strict):
    radius: PositiveFloat
    alpha: PositiveFloat
    beta: PositiveFloat
    gamma: NonNegativeFloat = 0.0
    center: list[float] | None = None


class AgentSpec(_Strict):
    index: PositiveInt
    desired_position: list[float] = Field(min_length=1)
    initial_state: list[float] = Field(min_length=1)
    controlled: bool = True
    u_nom: list[float] | None = None
    eta: NonNegativeFloat = 1.0
    controller: Literal["zero", "half_sontag"] = "zero"
    sontag_eps: PositiveFloat = 0.1
    barrier: BarrierSpec | None = None


class GraphSpec(_Strict):
    n: PositiveInt
    edges: Literal["complete", "chain", "ring"] | list[Annotated[list[int], Field(min_length=2, max_length=2)]] = "complete"


class DynamicsSpec(_Strict):
    kind: Literal["single_integrator_formation"] = "single_integrator_formation"
    xi: PositiveFloat


class SolverSpec(_Strict):
    k0: PositiveFloat = 5.0
    inner_dt: PositiveFloat = 0.01
    rounds: PositiveInt = 20
    first_rounds: PositiveInt | None = None
    h_floor: PositiveFloat = 1e-6
    altruism_reference: Literal["nominal", "baseline"] = "nominal"


class SimSpec(_Strict):
    horizon: PositiveFloat = 1.0
    control_dt: PositiveFloat = 1e-3
    mode: Literal["no_intervention", "ccbf_single", "distributed_base", "distributed_altruistic", "centralized"] = "distributed_base"
    integrator: Literal["rk4", "euler"] = "rk4"
    protected: list[int] | None = None


class OutputSpec(_Strict):
    dir: str | None = None
    rounds_trace: bool = False


class ScenarioFile(_Strict):
    schema_version: Literal[1]
    name: str = Field(min_length=1)
    description: str = ""
    graph: GraphSpec
    dynamics: DynamicsSpec
    agents: list[AgentSpec] = Field(min_length=1)
    solver: SolverSpec = SolverSpec()
    sim: SimSpec = SimSpec()
    output: OutputSpec = OutputSpec()


@dataclass(frozen=True)
class FieldError:
    path: str
    message: str

    def __str__(self) -> str:
        return f"{self.path}: {self.message}"


class ParseError(ValueError):
    """The text is not a YAML mapping; ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None) -> None:
        where = f"line {line}: " if line is not None else ""
        super().__init__(where + message)
        self.line = line


class ScenarioValidationError(ValueError):
    """The document violates the schema; ``errors`` lists every problem found."""

    def __init__(self, errors: list[FieldError]) -> None:
        super().__init__("; ".join(str(e) for e in errors))
        self.errors = errors


def _cross_check(sc: ScenarioFile) -> list[FieldError]:
    errs: list[FieldError] = []
    n = sc.graph.n
    indices = [a.index for a in sc.agents]
    if sorted(indices) != list(range(1, n + 1)):
        errs.append(FieldError("agents", f"agent indices {sorted(indices)} must be exactly 1..{n}"))
    if isinstance(sc.graph.edges, list):
        for k, (i, j) in enumerate(sc.graph.edges):
            if not (1 <= i <= n and 1 <= j <= n):
                errs.append(FieldError(f"graph.edges.{k}", f"edge ({i}, {j}) references an agent outside 1..{n}"))
    dim = len(sc.agents[0].desired_position)
    for k, a in enumerate(sc.agents):
        p = f"agents.{k}"
        if len(a.desired_position) != dim:
            errs.append(FieldError(f"{p}.desired_position", f"length {len(a.desired_position)} differs from agent 1's {dim}"))
        if len(a.initial_state) != len(a.desired_position):
            errs.append(FieldError(f"{p}.initial_state", "length must match desired_position"))
        if a.u_nom is not None:
            want = len(a.desired_position) if a.controlled else 0
            if len(a.u_nom) != want:
                errs.append(FieldError(f"{p}.u_nom", f"length must be {want}"))
        if a.barrier is not None and a.barrier.center is not None and len(a.barrier.center) != len(a.desired_position):
            errs.append(FieldError(f"{p}.barrier.center", "length must match desired_position"))
    barrier_agents = {a.index for a in sc.agents if a.barrier is not None}
    for k, i in enumerate(sc.sim.protected or []):
        if i not in barrier_agents:
            errs.append(FieldError(f"sim.protected.{k}", f"agent {i} has no barrier to protect"))
    if sc.sim.horizon < sc.sim.control_dt:
        errs.append(FieldError("sim.horizon", "must be at least control_dt"))
    return errs


def _line_of(text: str, path: tuple) -> int | None:
    """Best-effort 1-based line of a top-level or nested mapping key."""
    try:
        node = yaml.compose(text)
    except yaml.YAMLError:
        return None
    for key in path:
        if isinstance(node, yaml.MappingNode):
            hit = [v for k, v in node.value if k.value == str(key)]
            if not hit:
                return None
            line = next(k for k, _ in node.value if k.value == str(key)).start_mark.line + 1
            node = hit[0]
        elif isinstance(node, yaml.SequenceNode) and isinstance(key, int) and key < len(node.value):
            node = node.value[key]
            line = node.start_mark.line + 1
        else:
            return None
    return line if path else None


def parse_scenario(text: str) -> ScenarioFile:
    """Parse and validate scenario text.

    Raises:
        ParseError: empty document, malformed YAML or a non-mapping root.
        ScenarioValidationError: every schema and consistency error found.
    """
    if not text.strip():
        raise ParseError("empty scenario", 1)
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ParseError(str(getattr(exc, "problem", None) or exc), mark.line + 1 if mark else None) from exc
    if not isinstance(data, dict):
        raise ParseError("scenario root must be a mapping", 1)
    try:
        sc = ScenarioFile.model_validate(data)
    except PydanticValidationError as exc:
        errors = []
        for e in exc.errors():
            loc = tuple(e["loc"])
            path = ".".join(str(p) for p in loc) or "<root>"
            line = _line_of(text, loc)
            msg = e["msg"] + (f" (line {line})" if line else "")
            errors.append(FieldError(path, msg))
        raise ScenarioValidationError(errors) from None
    errs = _cross_check(sc)
    if errs:
        raise ScenarioValidationError(errs)
    return sc


def load_scenario(path: str | Path) -> ScenarioFile:
    return parse_scenario(Path(path).read_text())


def dump_scenario(sc: ScenarioFile) -> str:
    """YAML text that parses back to an equal :class:`ScenarioFile`."""
    data = sc.model_dump(mode="json")
    return yaml.safe_dump(data, sort_keys=False)


def bundled_scenario(name: str) -> Path:
    """Path of a scenario shipped with the package (``fig1``, ``fig2`` or ``fig3``)."""
    if name not in BUNDLED:
        raise KeyError(f"no bundled scenario {name!r}; choose from {BUNDLED}")
    return Path(str(resources.files("ccbf") / "scenarios" / f"{name}.scenario"))


def _graph(spec: GraphSpec) -> CouplingGraph:
    if spec.edges == "complete":
        return CouplingGraph.complete(spec.n)
    if spec.edges == "chain":
        return CouplingGraph.chain(spec.n)
    if spec.edges == "ring":
        return CouplingGraph.ring(spec.n)
    return CouplingGraph.from_edges(spec.n, [(i, j) for i, j in spec.edges])


def build_system(sc: ScenarioFile, controller: ControllerKind | str | None = None) -> tuple[System, np.ndarray]:
    """Models and stacked initial state; ``controller`` overrides every agent's virtual controller."""
    g = _graph(sc.graph)
    agents = sorted(sc.agents, key=lambda a: a.index)
    params = FormationParams(sc.dynamics.xi, tuple(np.array(a.desired_position, dtype=float) for a in agents))
    models = []
    for a in agents:
        kind = ControllerKind(controller if controller is not None else a.controller)
        ctrl = VirtualController.half_sontag(a.sontag_eps) if kind is ControllerKind.HALF_SONTAG else VirtualController.zero()
        bar = None
        if a.barrier is not None:
            b = a.barrier
            center = 0.0 if b.center is None else np.array(b.center, dtype=float)
            bar = BarrierFunction.ball(b.radius, b.alpha, b.beta, b.gamma, center)
        models.append(AgentModel(formation_agent(params, g, a.index, a.controlled), bar, ctrl, a.u_nom, a.eta))
    x0 = np.concatenate([np.array(a.initial_state, dtype=float) for a in agents])
    return System(g, models), x0


def sim_config(sc: ScenarioFile, mode: Mode | str | None = None, rounds: int | None = None, record_rounds: bool | None = None) -> SimConfig:
    """Simulation settings of ``sc`` with optional command-line overrides."""
    return SimConfig(
        horizon=sc.sim.horizon,
        control_dt=sc.sim.control_dt,
        integrator=Integrator(sc.sim.integrator),
        mode=Mode(mode if mode is not None else sc.sim.mode),
        rounds=rounds if rounds is not None else sc.solver.rounds,
        first_rounds=sc.solver.first_rounds,
        k0=sc.solver.k0,
        inner_dt=sc.solver.inner_dt,
        h_floor=sc.solver.h_floor,
        protected=tuple(sc.sim.protected) if sc.sim.protected is not None else None,
        record_rounds=sc.output.rounds_trace if record_rounds is None else record_rounds,
        altruism_reference=sc.solver.altruism_reference,
    )
