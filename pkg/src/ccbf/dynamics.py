"""Control-affine agent dynamics with neighbor coupling.

Each agent evolves as ``xdot_i = f_i(x_i, x_nbrs) + g_i(x_i) u_i`` where
``x_nbrs`` maps in-neighbor indices (excluding ``i``) to their states.
The built-in family is single integrators whose drift is a formation-keeping
law; any other plant can be supplied through :class:`AgentDynamics`.
"""

from __future__ import annotations

from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass

import numpy as np

from ccbf.topology import CouplingGraph

__all__ = [
    "AgentDynamics",
    "FormationParams",
    "formation_drift",
    "formation_agent",
    "eval_dynamics",
    "check_jacobian",
]

Array = np.ndarray
NeighborStates = Mapping[int, Array]
DriftFn = Callable[[Array, NeighborStates], Array]
InputMapFn = Callable[[Array], Array]
DriftJacobianFn = Callable[[Array, NeighborStates], dict[int, Array]]


@dataclass(frozen=True)
class AgentDynamics:
    """Drift, input map and drift Jacobians of one agent.

    Attributes:
        index: 1-based agent index (needed to key the self block of the Jacobian).
        state_dim: dimension ``N_i`` of the agent state.
        input_dim: dimension ``M_i`` of the input; 0 for uncontrolled agents.
        drift: ``(x_i, x_nbrs) -> f_i`` with shape ``(N_i,)``.
        input_map: ``x_i -> g_i`` with shape ``(N_i, M_i)``.
        drift_jacobian: ``(x_i, x_nbrs) -> {j: df_i/dx_j}`` for every in-neighbor
            ``j`` including ``i`` itself.
    """

    index: int
    state_dim: int
    input_dim: int
    drift: DriftFn
    input_map: InputMapFn
    drift_jacobian: DriftJacobianFn

    def __post_init__(self) -> None:
        if self.state_dim < 1:
            raise ValueError("state_dim must be positive")
        if self.input_dim < 0:
            raise ValueError("input_dim must be non-negative")


@dataclass(frozen=True)
class FormationParams:
    """Gain and target positions of the formation-keeping drift.

    ``delta(i, j)`` is the desired offset ``x_i^d - x_j^d`` between agents.
    """

    xi: float
    desired_positions: tuple[Array, ...]

    def __post_init__(self) -> None:
        if not self.xi > 0:
            raise ValueError(f"formation gain xi must be positive, got {self.xi}")
        object.__setattr__(
            self,
            "desired_positions",
            tuple(np.atleast_1d(np.asarray(p, dtype=float)) for p in self.desired_positions),
        )

    def delta(self, i: int, j: int) -> Array:
        return self.desired_positions[i - 1] - self.desired_positions[j - 1]


def formation_drift(
    params: FormationParams, g: CouplingGraph, i: int, x: Sequence[Array] | Mapping[int, Array]
) -> Array:
    """Formation-keeping velocity ``-xi * sum_j ((x_i - x_j) - delta_ij)``.

    The sum runs over the in-neighbors of ``i`` other than ``i`` itself.
    ``x`` is either a sequence of per-agent states (position ``j-1`` holds
    agent ``j``) or a mapping from agent index to state; only ``i`` and its
    in-neighbors need to be present.
    """
    get = _getter(x)
    xi_state = get(i)
    out = np.zeros_like(xi_state, dtype=float)
    for j in g.in_neighbors(i):
        if j == i:
            continue
        xj = get(j)
        out -= params.xi * ((xi_state - xj) - params.delta(i, j))
    return out


def _getter(x: Sequence[Array] | Mapping[int, Array]) -> Callable[[int], Array]:
    def get(j: int) -> Array:
        try:
            v = x[j] if isinstance(x, Mapping) else x[j - 1]
        except (KeyError, IndexError):
            raise KeyError(f"state of agent {j} is missing") from None
        return np.atleast_1d(np.asarray(v, dtype=float))

    return get


def formation_agent(params: FormationParams, g: CouplingGraph, i: int, controlled: bool = True) -> AgentDynamics:
    """Single integrator ``xdot_i = formation_drift + u_i`` for agent ``i``.

    With ``controlled=False`` the agent has no input channel (``M_i = 0``).
    """
    dim = params.desired_positions[i - 1].shape[0]
    others = [j for j in g.in_neighbors(i) if j != i]
    eye = np.eye(dim)
    input_dim = dim if controlled else 0

    def drift(x_i: Array, x_nbrs: NeighborStates) -> Array:
        states = dict(x_nbrs)
        states[i] = x_i
        return formation_drift(params, g, i, states)

    def input_map(x_i: Array) -> Array:
        return eye.copy() if controlled else np.zeros((dim, 0))

    def drift_jacobian(x_i: Array, x_nbrs: NeighborStates) -> dict[int, Array]:
        jac = {j: params.xi * eye for j in others}
        jac[i] = -params.xi * len(others) * eye
        return jac

    return AgentDynamics(i, dim, input_dim, drift, input_map, drift_jacobian)


def eval_dynamics(a: AgentDynamics, x_i: Array, x_nbrs: NeighborStates, u_i: Array | None = None) -> Array:
    """State derivative ``f_i(x_i, x_nbrs) + g_i(x_i) u_i``."""
    x_i = np.atleast_1d(np.asarray(x_i, dtype=float))
    if x_i.shape != (a.state_dim,):
        raise ValueError(f"agent {a.index}: state has shape {x_i.shape}, expected ({a.state_dim},)")
    u = np.zeros(0) if u_i is None else np.atleast_1d(np.asarray(u_i, dtype=float))
    if u.shape != (a.input_dim,):
        raise ValueError(f"agent {a.index}: input has shape {u.shape}, expected ({a.input_dim},)")
    xdot = np.asarray(a.drift(x_i, x_nbrs), dtype=float)
    if a.input_dim:
        xdot = xdot + a.input_map(x_i) @ u
    return xdot


def check_jacobian(a: AgentDynamics, x_i: Array, x_nbrs: NeighborStates, h: float = 1e-6) -> float:
    """Worst relative error between ``drift_jacobian`` and central differences.

    Each entry's error is scaled by ``max(1, |analytic entry|)``.
    """
    if h <= 0:
        raise ValueError("finite-difference step must be positive")
    x_i = np.atleast_1d(np.asarray(x_i, dtype=float))
    nbrs = {j: np.atleast_1d(np.asarray(v, dtype=float)) for j, v in x_nbrs.items()}
    analytic = a.drift_jacobian(x_i, nbrs)
    worst = 0.0
    for j, jac in analytic.items():
        base = x_i if j == a.index else nbrs[j]
        fd = np.zeros_like(jac, dtype=float)
        for k in range(base.shape[0]):
            step = np.zeros_like(base)
            step[k] = h
            if j == a.index:
                fp = a.drift(x_i + step, nbrs)
                fm = a.drift(x_i - step, nbrs)
            else:
                fp = a.drift(x_i, {**nbrs, j: base + step})
                fm = a.drift(x_i, {**nbrs, j: base - step})
            fd[:, k] = (np.asarray(fp) - np.asarray(fm)) / (2 * h)
        err = np.abs(fd - jac) / np.maximum(1.0, np.abs(jac))
        if err.size:
            worst = max(worst, float(err.max()))
    return worst
