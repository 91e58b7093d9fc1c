"""Centralized safety-filter QPs, used directly and as ground truth for the distributed solver.

Row order of both problems: coupled-condition rows by agent index, then the
first-order rows by agent index. Only agents that carry a barrier contribute
rows.
"""

from __future__ import annotations

from collections.abc import Sequence

import numpy as np

from ccbf.conditions import CcbfCoefficients, assemble_all, first_order_condition_row
from ccbf.model import System
from ccbf.qp import QuadraticProgram

__all__ = [
    "assemble_centralized",
    "assemble_centralized_aux",
    "aux_columns",
    "first_order_rows",
    "row_labels",
]

Array = np.ndarray


def first_order_rows(system: System, x: Array) -> dict[int, tuple[Array, float]]:
    """First-order tracking row ``(L_g h_i, gamma_i h_i - L_g h_i k_i)`` of each barrier agent."""
    out = {}
    for i in system.barrier_agents():
        m = system.agent(i)
        x_i, nbrs = system.local(x, i)
        out[i] = first_order_condition_row(m.barrier, m.dynamics, m.controller, x_i, nbrs)  # type: ignore[arg-type]
    return out


def _objective(system: System, u_nom: Sequence[Array] | None) -> tuple[Array, Array]:
    u0 = system.stack_inputs(system.nominal_inputs() if u_nom is None else u_nom)
    d = u0.shape[0]
    return 2.0 * np.eye(d), -2.0 * u0


def _first_order_block(system: System, x: Array, ncols: int) -> tuple[Array, Array]:
    sl = system.input_slices()
    rows = first_order_rows(system, x)
    A = np.zeros((len(rows), ncols))
    c = np.zeros(len(rows))
    for r, (i, (lgh, off)) in enumerate(sorted(rows.items())):
        A[r, sl[i]] = lgh
        c[r] = off
    return A, c


def assemble_centralized(
    system: System,
    x: Array,
    u_nom: Sequence[Array] | None = None,
    coeffs: dict[int, CcbfCoefficients] | None = None,
) -> QuadraticProgram:
    """``min sum ||u_i - u_i^nom||^2`` subject to every ``psi_i >= 0`` and first-order row.

    The objective is expressed exactly (``H = 2I``), so the returned multipliers
    belong to the unscaled cost.
    """
    coeffs = assemble_all(system, x) if coeffs is None else coeffs
    H, f = _objective(system, u_nom)
    d = f.shape[0]
    sl = system.input_slices()
    agents = sorted(coeffs)
    A = np.zeros((len(agents), d))
    c = np.zeros(len(agents))
    for r, i in enumerate(agents):
        for j, a in coeffs[i].a.items():
            A[r, sl[j]] += a
            c[r] += coeffs[i].b[j]
    G, q = _first_order_block(system, x, d)
    return QuadraticProgram(H, f, np.vstack([A, G]), np.concatenate([c, q]))


def aux_columns(system: System) -> dict[tuple[int, int], int]:
    """Column of the auxiliary variable of participant ``j`` in agent ``i``'s condition.

    Columns follow the stacked inputs, ordered by ``(i, j)``.
    """
    start = sum(a.input_dim for a in system.agents)
    cols = {}
    for i in system.barrier_agents():
        for j in system.graph.in_neighbors(i):
            cols[(i, j)] = start + len(cols)
    return cols


def assemble_centralized_aux(
    system: System,
    x: Array,
    u_nom: Sequence[Array] | None = None,
    coeffs: dict[int, CcbfCoefficients] | None = None,
) -> QuadraticProgram:
    """Equivalent problem with auxiliary variables splitting each coupled condition.

    Agent ``i``'s condition becomes one share row per participant
    ``j in N_i^+``::

        a_ij^T u_j + sum_{k in N_i^+} (y_j^i - y_k^i) + b_ij >= 0

    Summing the shares over ``j`` telescopes the ``y`` terms and recovers
    ``psi_i >= 0``; conversely any ``u`` with ``psi_i >= 0`` admits ``y``
    making every share nonnegative. The ``y`` block carries no cost.
    """
    coeffs = assemble_all(system, x) if coeffs is None else coeffs
    Hu, fu = _objective(system, u_nom)
    du = fu.shape[0]
    cols = aux_columns(system)
    d = du + len(cols)
    H = np.zeros((d, d))
    H[:du, :du] = Hu
    f = np.concatenate([fu, np.zeros(len(cols))])
    sl = system.input_slices()

    rows, offs = [], []
    for i in sorted(coeffs):
        group = system.graph.in_neighbors(i)
        for j in group:
            row = np.zeros(d)
            row[sl[j]] = coeffs[i].a[j]
            for k in group:
                row[cols[(i, j)]] += 1.0
                row[cols[(i, k)]] -= 1.0
            rows.append(row)
            offs.append(coeffs[i].b[j])
    G, q = _first_order_block(system, x, du)
    G = np.hstack([G, np.zeros((G.shape[0], len(cols)))])
    A = np.vstack([np.array(rows).reshape(-1, d), G])
    return QuadraticProgram(H, f, A, np.concatenate([np.array(offs), q]))


def row_labels(system: System, aux: bool = False) -> list[str]:
    """Human-readable labels matching the row order of the assembled problems."""
    labels = []
    for i in system.barrier_agents():
        if aux:
            labels += [f"share[{i},{j}]" for j in system.graph.in_neighbors(i)]
        else:
            labels.append(f"psi[{i}]")
    labels += [f"first_order[{i}]" for i in system.barrier_agents()]
    return labels
