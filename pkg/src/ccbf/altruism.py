"""Altruistic safety: importance weights, relatedness and Hamilton's-rule rows.

An agent's importance grows as it nears its safety boundary,
``w_i = eta_i / h_i``. Relatedness ``r_ij = w_j / w_i`` measures how much
``j``'s safety matters relative to ``i``'s. Agent ``i`` acts altruistically
when the relatedness-weighted benefit of its input to the constraints it
participates in covers its own cost, which is the linear row

    (sum_{j in N_i^-} r_ij a_ji)^T u_i + sum_{j in N_i^-} r_ij b_ji >= 0.
"""

from __future__ import annotations

import logging
from collections.abc import Mapping, Sequence
from dataclasses import dataclass

import numpy as np

from ccbf.conditions import CcbfCoefficients, assemble_all
from ccbf.consensus import ConsensusState, LocalSolution, solve_local
from ccbf.model import System

__all__ = [
    "H_FLOOR",
    "ZeroWeight",
    "DegenerateRow",
    "SafetyWeights",
    "UMin",
    "compute_weight",
    "compute_relatedness",
    "safety_weights",
    "safety_cost",
    "safety_benefit",
    "altruism_row",
    "altruism_rows",
    "solve_local_altruistic",
    "u_min_metric",
]

log = logging.getLogger(__name__)

Array = np.ndarray

#: guard for the weight singularity at h_i = 0
H_FLOOR = 1e-6


class ZeroWeight(ValueError):
    """Relatedness ``w_j / w_i`` is undefined because ``w_i = 0``."""


class DegenerateRow(ValueError):
    """The coefficient that ``u_min_metric`` divides by is (numerically) zero."""


def compute_weight(eta_i: float, h_i: float, floor: float = H_FLOOR) -> float:
    """Safety importance ``eta_i / max(h_i, floor)``.

    The unguarded ratio is undefined at ``h_i = 0`` and negative outside the
    safe set; the floor keeps it finite and positive.
    """
    if not floor > 0:
        raise ValueError("floor must be positive")
    if eta_i < 0:
        raise ValueError("eta must be non-negative")
    return eta_i / max(h_i, floor)


@dataclass(frozen=True)
class SafetyWeights:
    eta: dict[int, float]
    w: dict[int, float]
    floor: float = H_FLOOR

    def relatedness(self, i: int, j: int) -> float:
        return compute_relatedness(self, i, j)


def safety_weights(system: System, x: Array, floor: float = H_FLOOR) -> SafetyWeights:
    """Weights of every barrier agent at the full state ``x``."""
    parts = system.split(x)
    eta, w = {}, {}
    for i in system.barrier_agents():
        m = system.agent(i)
        eta[i] = m.eta
        w[i] = compute_weight(m.eta, float(m.barrier.eval(parts[i - 1])), floor)  # type: ignore[union-attr]
    return SafetyWeights(eta, w, floor)


def compute_relatedness(w: SafetyWeights, i: int, j: int) -> float:
    """``r_ij = w_j / w_i``; equals 1 for ``i == j``."""
    if i == j:
        return 1.0
    if w.w[i] == 0:
        raise ZeroWeight(f"agent {i} has zero safety weight; relatedness to {j} is undefined")
    return w.w[j] / w.w[i]


def safety_cost(coeffs_i: CcbfCoefficients, u_i: Array) -> float:
    """``C_i = -a_ii^T u_i - b_ii``.

    Note the sign: the expression is negative when ``u_i`` helps agent ``i``'s
    own condition. It is returned exactly as defined.
    """
    i = coeffs_i.agent
    a = coeffs_i.a[i]
    u = np.atleast_1d(np.asarray(u_i, dtype=float)) if a.size else np.zeros(0)
    return -float(a @ u) - coeffs_i.b[i]


def safety_benefit(coeffs_j: CcbfCoefficients, i: int, u_i: Array) -> float:
    """``a_ji^T u_i + b_ji``: what donor ``i`` adds to recipient ``j``'s condition."""
    if i not in coeffs_j.a:
        raise ValueError(f"agent {i} does not enter the condition of agent {coeffs_j.agent}")
    a = coeffs_j.a[i]
    u = np.atleast_1d(np.asarray(u_i, dtype=float)) if a.size else np.zeros(0)
    return float(a @ u) + coeffs_j.b[i]


def altruism_row(
    i: int,
    coeffs: Mapping[int, CcbfCoefficients],
    relatedness: Mapping[int, float],
) -> tuple[Array, float]:
    """Row and offset of the Hamilton's-rule inequality for agent ``i``.

    ``coeffs`` holds the coefficients of every recipient ``j`` (``i`` enters
    ``j``'s condition), ``relatedness[j]`` is ``r_ij``. Recipients without a
    relatedness entry are skipped.
    """
    row = None
    off = 0.0
    for j, cj in sorted(coeffs.items()):
        if i not in cj.a or j not in relatedness:
            continue
        r = relatedness[j]
        row = r * cj.a[i] if row is None else row + r * cj.a[i]
        off += r * cj.b[i]
    if row is None:
        raise ValueError(f"agent {i} enters no condition with a defined relatedness")
    return row, off


def altruism_rows(system: System, x: Array, coeffs: Mapping[int, CcbfCoefficients], floor: float = H_FLOOR) -> dict[int, list[tuple[Array, float]]]:
    """Altruism row of every controlled agent that has a weight of its own.

    Agents without a barrier or with zero weight have no defined relatedness
    and get no row.
    """
    weights = safety_weights(system, x, floor)
    out: dict[int, list[tuple[Array, float]]] = {}
    for i in system.controlled_agents():
        if i not in weights.w or weights.w[i] == 0:
            log.debug("agent %d has no altruism row (no weight)", i)
            continue
        recipients = {j: coeffs[j] for j in system.graph.out_neighbors(i) if j in coeffs}
        rel = {j: compute_relatedness(weights, i, j) for j in recipients}
        out[i] = [altruism_row(i, recipients, rel)]
    return out


def solve_local_altruistic(
    i: int,
    system: System,
    x: Array,
    u_ref_i: Array | None,
    cs: ConsensusState,
    coeffs: Mapping[int, CcbfCoefficients] | None = None,
    floor: float = H_FLOOR,
) -> LocalSolution:
    """Local problem of agent ``i`` with its altruism row appended.

    Raises:
        LocalInfeasible: when the augmented local problem has no solution.
    """
    coeffs = assemble_all(system, x) if coeffs is None else coeffs
    extra = altruism_rows(system, x, coeffs, floor).get(i, [])
    return solve_local(i, system, x, u_ref_i, cs, coeffs, extra_rows=extra)


@dataclass(frozen=True)
class UMin:
    """Bound on agent 2's input implied by its coupled condition given agent 1's input.

    ``upper`` is true when the coefficient of ``u_2`` is negative, i.e. the
    condition reads ``u_2 <= value`` rather than ``u_2 >= value``.
    """

    value: float
    upper: bool


def u_min_metric(coeffs_2: CcbfCoefficients, u_1_star: float | Array, recipient: int = 2, donor: int = 1) -> UMin:
    """``-(b_22 + a_21 u_1 + b_21) / a_22`` for the two-agent scalar example.

    Raises:
        DegenerateRow: when ``|a_22| < 1e-12``.
    """
    a22 = coeffs_2.a[recipient]
    if a22.size != 1 or coeffs_2.a[donor].size not in (0, 1):
        raise ValueError("u_min_metric needs scalar inputs")
    a = float(a22[0])
    if abs(a) < 1e-12:
        raise DegenerateRow("coefficient of the recipient's own input vanishes")
    a21 = coeffs_2.a[donor]
    push = float(a21 @ np.atleast_1d(u_1_star)) if a21.size else 0.0
    value = -(coeffs_2.b[recipient] + push + coeffs_2.b[donor]) / a
    return UMin(value, a < 0)
