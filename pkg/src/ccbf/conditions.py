"""Collaborative barrier conditions: the high-order candidate and its linear rows.

For agent ``i`` with barrier ``h_i`` and virtual controller ``k_i`` the
candidate is ``h_i^+ = L_f h_i + L_g h_i k_i + alpha_i h_i``. Its derivative
along the coupled flow plus ``beta_i h_i^+`` is affine in the inputs of the
in-neighbors:

    psi_i = sum_{j in N_i^+} a_ij^T u_j + b_ij

with ``a_ij = g_j^T grad_{x_j} h_i^+`` and ``b_ij = grad_{x_j} h_i^+ . f_j``
(``+ beta_i h_i^+`` when ``j == i``).
"""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import dataclass

import numpy as np

from ccbf.barrier import BarrierFunction, ControllerKind, VirtualController, half_sontag_lambda
from ccbf.dynamics import AgentDynamics
from ccbf.model import System

__all__ = [
    "CcbfCoefficients",
    "controller_output",
    "eval_half_sontag",
    "eval_h_plus",
    "assemble_coefficients",
    "assemble_all",
    "eval_psi",
    "fd_psi_oracle",
    "first_order_condition_row",
]

Array = np.ndarray
NeighborStates = Mapping[int, Array]

#: central-difference step for derivatives of L_g h_i k_i under non-zero controllers
COMPOSITE_FD_STEP = 1e-6


@dataclass(frozen=True)
class CcbfCoefficients:
    """Linear coefficients of agent ``i``'s coupled safety condition at one state.

    ``a`` and ``b`` are keyed by the in-neighbors ``j`` of ``i``; a missing key
    means the coefficient is zero.
    """

    agent: int
    a: dict[int, Array]
    b: dict[int, float]
    h: float
    h_plus: float

    def neighbor_contribution(self, u: Sequence[Array] | Mapping[int, Array]) -> float:
        """``sum_{j != i} a_ij^T u_j + b_ij``: what the neighbors add to ``psi_i``."""
        return sum(_term(self, j, u) for j in self.a if j != self.agent)


def _input(u: Sequence[Array] | Mapping[int, Array], j: int) -> Array:
    v = u[j] if isinstance(u, Mapping) else u[j - 1]
    return np.atleast_1d(np.asarray(v, dtype=float))


def _term(c: CcbfCoefficients, j: int, u: Sequence[Array] | Mapping[int, Array]) -> float:
    a = c.a[j]
    if a.size == 0:
        return float(c.b[j])
    uj = _input(u, j)
    if uj.shape != a.shape:
        raise ValueError(f"input of agent {j} has shape {uj.shape}, coefficient expects {a.shape}")
    return float(a @ uj + c.b[j])


def _lie_terms(b: BarrierFunction, dyn: AgentDynamics, x_i: Array, x_nbrs: NeighborStates) -> tuple[float, Array]:
    grad = np.atleast_1d(b.grad(x_i))
    f = np.asarray(dyn.drift(x_i, x_nbrs), dtype=float)
    lgh = grad @ dyn.input_map(x_i) if dyn.input_dim else np.zeros(0)
    return float(grad @ f), lgh


def eval_half_sontag(
    b: BarrierFunction, dyn: AgentDynamics, x_i: Array, x_nbrs: NeighborStates, eps: float = 0.1
) -> Array:
    """Half-Sontag feedback ``lambda(a, b) (L_g h)^T`` with ``a = L_f h + alpha h``, ``b = ||L_g h||^2``."""
    if dyn.input_dim < 1:
        raise ValueError(f"agent {dyn.index} has no input channel")
    x_i = np.atleast_1d(np.asarray(x_i, dtype=float))
    lfh, lgh = _lie_terms(b, dyn, x_i, x_nbrs)
    a_val = lfh + b.alpha * b.eval(x_i)
    b_val = float(lgh @ lgh)
    return half_sontag_lambda(a_val, b_val, eps) * lgh


def controller_output(
    b: BarrierFunction, dyn: AgentDynamics, k: VirtualController, x_i: Array, x_nbrs: NeighborStates
) -> Array:
    """Value of the virtual controller ``k_i`` at the given neighborhood state."""
    if dyn.input_dim == 0 or k.kind is ControllerKind.ZERO:
        return np.zeros(dyn.input_dim)
    if k.kind is ControllerKind.HALF_SONTAG:
        return eval_half_sontag(b, dyn, x_i, x_nbrs, k.sontag_eps)
    out = np.atleast_1d(np.asarray(k.custom_eval(x_i, x_nbrs), dtype=float))  # type: ignore[misc]
    if out.shape != (dyn.input_dim,):
        raise ValueError(f"custom controller of agent {dyn.index} returned shape {out.shape}")
    return out


def _composite(b: BarrierFunction, dyn: AgentDynamics, k: VirtualController, x_i: Array, x_nbrs: NeighborStates) -> float:
    """``L_g h_i k_i`` as a scalar function of the neighborhood state."""
    if dyn.input_dim == 0 or k.kind is ControllerKind.ZERO:
        return 0.0
    _, lgh = _lie_terms(b, dyn, x_i, x_nbrs)
    return float(lgh @ controller_output(b, dyn, k, x_i, x_nbrs))


def eval_h_plus(
    b: BarrierFunction, dyn: AgentDynamics, k: VirtualController, x_i: Array, x_nbrs: NeighborStates
) -> float:
    """High-order candidate ``L_f h + L_g h k + alpha h``."""
    x_i = np.atleast_1d(np.asarray(x_i, dtype=float))
    lfh, _ = _lie_terms(b, dyn, x_i, x_nbrs)
    return lfh + _composite(b, dyn, k, x_i, x_nbrs) + b.alpha * float(b.eval(x_i))


def _grad_h_plus(
    b: BarrierFunction, dyn: AgentDynamics, k: VirtualController, x_i: Array, x_nbrs: NeighborStates
) -> dict[int, Array]:
    """Gradient of ``h_i^+`` with respect to each in-neighbor block (including ``i``)."""
    i = dyn.index
    grad = np.atleast_1d(b.grad(x_i))
    f = np.asarray(dyn.drift(x_i, x_nbrs), dtype=float)
    jac = dyn.drift_jacobian(x_i, x_nbrs)
    out = {j: grad @ np.atleast_2d(J) for j, J in jac.items()}
    out.setdefault(i, np.zeros_like(grad))
    out[i] = out[i] + f @ np.atleast_2d(b.hess(x_i)) + b.alpha * grad

    if dyn.input_dim and k.kind is not ControllerKind.ZERO:
        hstep = COMPOSITE_FD_STEP
        for j in out:
            base = x_i if j == i else np.atleast_1d(x_nbrs[j])
            d = np.zeros(base.shape[0])
            for m in range(base.shape[0]):
                e = np.zeros_like(base)
                e[m] = hstep
                if j == i:
                    sp = _composite(b, dyn, k, x_i + e, x_nbrs)
                    sm = _composite(b, dyn, k, x_i - e, x_nbrs)
                else:
                    sp = _composite(b, dyn, k, x_i, {**x_nbrs, j: base + e})
                    sm = _composite(b, dyn, k, x_i, {**x_nbrs, j: base - e})
                d[m] = (sp - sm) / (2 * hstep)
            out[j] = out[j] + d
    return out


def assemble_coefficients(i: int, system: System, x: Array) -> CcbfCoefficients:
    """Coefficients ``a_ij``, ``b_ij`` of agent ``i``'s condition at full state ``x``."""
    model = system.agent(i)
    if model.barrier is None:
        raise ValueError(f"agent {i} has no barrier function")
    parts = system.split(x)
    x_i, nbrs = system.local(x, i)
    dyn, bar, ctl = model.dynamics, model.barrier, model.controller
    h_plus = eval_h_plus(bar, dyn, ctl, x_i, nbrs)
    grads = _grad_h_plus(bar, dyn, ctl, x_i, nbrs)

    a: dict[int, Array] = {}
    bcoef: dict[int, float] = {}
    for j in system.graph.in_neighbors(i):
        other = system.agent(j).dynamics
        x_j, nbrs_j = parts[j - 1], {k: parts[k - 1] for k in system.graph.in_neighbors(j) if k != j}
        f_j = np.asarray(other.drift(x_j, nbrs_j), dtype=float)
        gvec = grads.get(j, np.zeros(other.state_dim))
        a[j] = gvec @ other.input_map(x_j) if other.input_dim else np.zeros(0)
        bcoef[j] = float(gvec @ f_j)
    bcoef[i] += bar.beta * h_plus
    return CcbfCoefficients(i, a, bcoef, float(bar.eval(x_i)), float(h_plus))


def assemble_all(system: System, x: Array) -> dict[int, CcbfCoefficients]:
    """Coefficients of every agent that carries a barrier."""
    return {i: assemble_coefficients(i, system, x) for i in system.barrier_agents()}


def eval_psi(coeffs: CcbfCoefficients, u: Sequence[Array] | Mapping[int, Array]) -> float:
    """``psi_i = sum_j a_ij^T u_j + b_ij``; nonnegative iff the coupled condition holds."""
    return sum(_term(coeffs, j, u) for j in coeffs.a)


def fd_psi_oracle(i: int, system: System, x: Array, u: Sequence[Array], dt: float = 1e-6) -> float:
    """Central-difference estimate of ``d/dt h_i^+ + beta_i h_i^+`` along the flow.

    Only evaluates ``h_i^+`` and the dynamics, so it checks the coefficient
    assembly independently.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    model = system.agent(i)
    if model.barrier is None:
        raise ValueError(f"agent {i} has no barrier function")
    x = np.asarray(x, dtype=float)
    v = system.xdot(x, u)

    def hp(state: Array) -> float:
        x_i, nbrs = system.local(state, i)
        return eval_h_plus(model.barrier, model.dynamics, model.controller, x_i, nbrs)  # type: ignore[arg-type]

    rate = (hp(x + dt * v) - hp(x - dt * v)) / (2 * dt)
    return rate + model.barrier.beta * hp(x)


def first_order_condition_row(
    b: BarrierFunction, dyn: AgentDynamics, k: VirtualController, x_i: Array, x_nbrs: NeighborStates
) -> tuple[Array, float]:
    """Row and offset of ``L_g h u + gamma h - L_g h k >= 0`` (offset excludes the input term)."""
    x_i = np.atleast_1d(np.asarray(x_i, dtype=float))
    _, lgh = _lie_terms(b, dyn, x_i, x_nbrs)
    kval = controller_output(b, dyn, k, x_i, x_nbrs)
    offset = b.gamma * float(b.eval(x_i)) - (float(lgh @ kval) if lgh.size else 0.0)
    return lgh, offset
