"""Agent bundles and the coupled multi-agent system."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from ccbf.barrier import BarrierFunction, VirtualController
from ccbf.dynamics import AgentDynamics, eval_dynamics
from ccbf.topology import CouplingGraph

__all__ = ["AgentModel", "System"]

Array = np.ndarray


@dataclass(frozen=True)
class AgentModel:
    """Everything known about one agent.

    ``barrier`` is ``None`` for agents without a safety constraint of their own.
    ``eta`` is the bias used by the altruistic safety weights.
    """

    dynamics: AgentDynamics
    barrier: BarrierFunction | None = None
    controller: VirtualController = field(default_factory=VirtualController.zero)
    u_nom: Array | None = None
    eta: float = 1.0

    def __post_init__(self) -> None:
        m = self.dynamics.input_dim
        u = np.zeros(m) if self.u_nom is None else np.atleast_1d(np.asarray(self.u_nom, dtype=float))
        if u.shape != (m,):
            raise ValueError(f"agent {self.index}: nominal input has shape {u.shape}, expected ({m},)")
        object.__setattr__(self, "u_nom", u)
        if self.eta < 0:
            raise ValueError(f"agent {self.index}: eta must be non-negative")

    @property
    def index(self) -> int:
        return self.dynamics.index

    @property
    def state_dim(self) -> int:
        return self.dynamics.state_dim

    @property
    def input_dim(self) -> int:
        return self.dynamics.input_dim


@dataclass(frozen=True)
class System:
    """Coupling graph plus one :class:`AgentModel` per agent (``agents[i-1]`` is agent ``i``).

    Full states are flat vectors with agent blocks stacked in index order;
    full inputs are sequences of per-agent vectors.
    """

    graph: CouplingGraph
    agents: tuple[AgentModel, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "agents", tuple(self.agents))
        if len(self.agents) != self.graph.n:
            raise ValueError(f"graph has {self.graph.n} agents but {len(self.agents)} models were given")
        for k, a in enumerate(self.agents, start=1):
            if a.index != k:
                raise ValueError(f"agent model at position {k} carries index {a.index}")
        offsets = np.cumsum([0] + [a.state_dim for a in self.agents])
        object.__setattr__(self, "_offsets", offsets)

    @property
    def n(self) -> int:
        return self.graph.n

    @property
    def state_dim(self) -> int:
        return int(self._offsets[-1])  # type: ignore[attr-defined]

    def agent(self, i: int) -> AgentModel:
        if not 1 <= i <= self.n:
            raise IndexError(f"agent index {i} out of range 1..{self.n}")
        return self.agents[i - 1]

    def barrier_agents(self) -> list[int]:
        """Indices of agents that carry a safety constraint."""
        return [a.index for a in self.agents if a.barrier is not None]

    def controlled_agents(self) -> list[int]:
        return [a.index for a in self.agents if a.input_dim > 0]

    def split(self, x: Array) -> list[Array]:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.state_dim,):
            raise ValueError(f"full state has shape {x.shape}, expected ({self.state_dim},)")
        o = self._offsets  # type: ignore[attr-defined]
        return [x[o[k] : o[k + 1]] for k in range(self.n)]

    def join(self, parts: Sequence[Array]) -> Array:
        return np.concatenate([np.atleast_1d(np.asarray(p, dtype=float)) for p in parts])

    def local(self, x: Array, i: int) -> tuple[Array, dict[int, Array]]:
        """Agent ``i``'s own state and its in-neighbor states (without ``i``)."""
        parts = self.split(x)
        nbrs = {j: parts[j - 1] for j in self.graph.in_neighbors(i) if j != i}
        return parts[i - 1], nbrs

    def zero_inputs(self) -> list[Array]:
        return [np.zeros(a.input_dim) for a in self.agents]

    def nominal_inputs(self) -> list[Array]:
        return [a.u_nom.copy() for a in self.agents]  # type: ignore[union-attr]

    def xdot(self, x: Array, u: Sequence[Array]) -> Array:
        """Flat state derivative under inputs ``u`` (one vector per agent)."""
        parts = self.split(x)
        out = []
        for a in self.agents:
            i = a.index
            nbrs = {j: parts[j - 1] for j in self.graph.in_neighbors(i) if j != i}
            out.append(eval_dynamics(a.dynamics, parts[i - 1], nbrs, u[i - 1]))
        return np.concatenate(out)

    # stacked-input helpers used by the centralized problems
    def input_slices(self) -> dict[int, slice]:
        """Slice of each agent's input inside the stacked decision vector."""
        out, k = {}, 0
        for a in self.agents:
            out[a.index] = slice(k, k + a.input_dim)
            k += a.input_dim
        return out

    def stack_inputs(self, u: Sequence[Array]) -> Array:
        return np.concatenate([np.atleast_1d(np.asarray(v, dtype=float)) for v in u]) if u else np.zeros(0)

    def unstack_inputs(self, z: Array) -> list[Array]:
        sl = self.input_slices()
        return [np.array(z[sl[a.index]], dtype=float) for a in self.agents]
