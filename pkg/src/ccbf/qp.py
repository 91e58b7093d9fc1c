"""Small dense convex QP solver.

Solves ``min 1/2 z^T H z + f^T z  s.t.  A z + c >= 0`` with ``H`` symmetric
positive semidefinite using a primal active-set method. Steps are computed in
the null space of the working set, so zero-curvature directions (including
pure LPs) are handled. A feasible start is found with a phase-1 LP that
minimizes the largest constraint violation; a positive optimum certifies
infeasibility.

Multipliers follow the Lagrangian ``1/2 z^T H z + f^T z - lam^T (A z + c)``
with ``lam >= 0``.
"""

from __future__ import annotations

import enum
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "QpStatus",
    "QuadraticProgram",
    "QpSolution",
    "MaxIterationsError",
    "solve_qp",
    "kkt_residuals",
    "format_qp",
]

Array = np.ndarray

FEAS_TOL = 1e-9
ZERO_ROW_TOL = 1e-14
PSD_TOL = 1e-10


class QpStatus(str, enum.Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"


class MaxIterationsError(RuntimeError):
    """Active-set iteration cap exceeded; indicates numerical trouble."""


@dataclass(frozen=True)
class QuadraticProgram:
    hessian: Array
    linear: Array
    A: Array
    c: Array

    def __post_init__(self) -> None:
        H = np.atleast_2d(np.asarray(self.hessian, dtype=float))
        f = np.atleast_1d(np.asarray(self.linear, dtype=float))
        d = f.shape[0]
        if d == 0:
            H = np.zeros((0, 0))
        c = np.asarray(self.c, dtype=float).reshape(-1)
        A = np.asarray(self.A, dtype=float)
        A = A.reshape(-1, d) if A.size else np.zeros((c.shape[0], d))
        if H.shape != (d, d):
            raise ValueError(f"hessian has shape {H.shape}, expected ({d}, {d})")
        if A.shape[0] != c.shape[0]:
            raise ValueError(f"{A.shape[0]} constraint rows but {c.shape[0]} offsets")
        if d and np.abs(H - H.T).max() > 1e-12:
            raise ValueError("hessian is not symmetric")
        off_diag = d > 1 and np.any(H[~np.eye(d, dtype=bool)])
        lowest = np.linalg.eigvalsh(H).min() if off_diag else (H.diagonal().min() if d else 0.0)
        if lowest < -PSD_TOL * max(1.0, np.abs(H).max() if d else 0.0):
            raise ValueError("hessian is not positive semidefinite")
        for name, v in (("hessian", H), ("linear", f), ("A", A), ("c", c)):
            if not np.all(np.isfinite(v)):
                raise ValueError(f"{name} has non-finite entries")
        object.__setattr__(self, "hessian", H)
        object.__setattr__(self, "linear", f)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "c", c)

    @property
    def dim(self) -> int:
        return self.linear.shape[0]

    @property
    def rows(self) -> int:
        return self.c.shape[0]

    def objective(self, z: Array) -> float:
        return float(0.5 * z @ self.hessian @ z + self.linear @ z)

    def slack(self, z: Array) -> Array:
        return self.A @ z + self.c


@dataclass(frozen=True)
class QpSolution:
    z: Array
    multipliers: Array
    status: QpStatus
    active: tuple[int, ...] = ()
    iterations: int = 0
    violating_rows: tuple[int, ...] = field(default=())

    @property
    def optimal(self) -> bool:
        return self.status is QpStatus.OPTIMAL


def kkt_residuals(p: QuadraticProgram, z: Array, lam: Array) -> dict[str, float]:
    """Stationarity, primal violation, complementarity and dual violation (all >= 0)."""
    s = p.slack(z)
    stat = p.hessian @ z + p.linear - p.A.T @ lam
    return {
        "stationarity": float(np.abs(stat).max()) if stat.size else 0.0,
        "primal": float(max(0.0, -s.min())) if s.size else 0.0,
        "complementarity": float(np.abs(lam * s).max()) if s.size else 0.0,
        "dual": float(max(0.0, -lam.min())) if lam.size else 0.0,
    }


def _null_space(M: Array, d: int) -> Array:
    if M.shape[0] == 0:
        return np.eye(d)
    _, s, vt = np.linalg.svd(M)
    rank = int((s > 1e-12 * max(1.0, s[0])).sum())
    return vt[rank:].T


def _active_set(
    H: Array,
    f: Array,
    A: Array,
    c: Array,
    z: Array,
    work: list[int],
    max_iter: int,
) -> tuple[QpStatus, Array, Array, list[int], int]:
    """Primal active-set iterations from the feasible point ``z``.

    Rows of ``A`` are assumed normalized (unit norm or zero).
    Returns status, point, multipliers of the working set, working set, iterations.
    """
    d = f.shape[0]
    m = c.shape[0]
    hscale = max(1.0, float(np.abs(H).max()) if H.size else 0.0)
    for it in range(1, max_iter + 1):
        g = H @ z + f
        gscale = max(1.0, float(np.abs(g).max()), float(np.abs(f).max()) if f.size else 0.0)
        Aw = A[work] if work else np.zeros((0, d))
        Z = _null_space(Aw, d)
        step = None
        ray = False
        if Z.shape[1]:
            Hr = Z.T @ H @ Z
            gr = Z.T @ g
            ev, V = np.linalg.eigh(Hr)
            pos = ev > 1e-11 * hscale
            coords = V.T @ gr
            null_part = np.where(pos, 0.0, coords)
            if np.abs(null_part).max() > 1e-11 * gscale:
                step = -Z @ (V @ null_part)
                ray = True
            else:
                v = V @ np.where(pos, -coords / np.where(pos, ev, 1.0), 0.0)
                step = Z @ v
        if step is None or np.abs(step).max() <= 1e-13 * max(1.0, float(np.abs(z).max())):
            if not work:
                return QpStatus.OPTIMAL, z, np.zeros(0), work, it
            lam, *_ = np.linalg.lstsq(Aw.T, g, rcond=None)
            neg = [k for k, lv in enumerate(lam) if lv < -1e-10 * gscale]
            if not neg:
                return QpStatus.OPTIMAL, z, lam, work, it
            # Bland: drop the lowest-index row with a negative multiplier
            drop = min(neg, key=lambda k: work[k])
            work = [r for k, r in enumerate(work) if k != drop]
            continue

        slack = A @ z + c
        rate = A @ step
        best = np.inf if ray else 1.0
        block = -1
        in_work = set(work)
        for r in range(m):
            if r in in_work or rate[r] >= -1e-14 * np.abs(step).max():
                continue
            t = max(0.0, slack[r]) / -rate[r]
            if t < best - 1e-14 * max(1.0, best if np.isfinite(best) else 1.0):
                best, block = t, r
        if not np.isfinite(best):
            return QpStatus.UNBOUNDED, z, np.zeros(len(work)), work, it
        z = z + best * step
        if block >= 0:
            work = sorted(work + [block])
    raise MaxIterationsError(f"active-set iterations exceeded {max_iter}")


def _initial_work(A: Array, slack: Array, d: int, candidates: Sequence[int]) -> list[int]:
    work: list[int] = []
    for r in candidates:
        if abs(slack[r]) > 1e-10 or not np.any(A[r]):
            continue
        trial = work + [r]
        if np.linalg.matrix_rank(A[trial], tol=1e-10) == len(trial):
            work = trial
        if len(work) == d:
            break
    return sorted(work)


def solve_qp(
    p: QuadraticProgram,
    z0: Array | None = None,
    warm_active: Sequence[int] | None = None,
) -> QpSolution:
    """Solve ``p``; ``z0``/``warm_active`` warm-start from a previous solution.

    Raises:
        MaxIterationsError: when more than ``100 * dim`` active-set iterations
            are needed in either phase.
    """
    d, m = p.dim, p.rows
    norms = np.linalg.norm(p.A, axis=1) if m else np.zeros(0)
    zero_rows = norms <= ZERO_ROW_TOL
    scale = np.where(zero_rows, 1.0, norms)
    A = p.A / scale[:, None] if m else p.A
    c = p.c / scale if m else p.c
    H, f = p.hessian, p.linear
    cap = 100 * max(d, 1)

    bad_const = [r for r in range(m) if zero_rows[r] and c[r] < -FEAS_TOL]
    if bad_const:
        return QpSolution(np.zeros(d), np.zeros(m), QpStatus.INFEASIBLE, violating_rows=tuple(bad_const))
    A = np.where(zero_rows[:, None], 0.0, A) if m else A

    if d == 0:
        return QpSolution(np.zeros(0), np.zeros(m), QpStatus.OPTIMAL)
    if d == 1 and H[0, 0] > 0:
        return _solve_scalar(H[0, 0], f[0], A[:, 0], c, scale)

    z = np.zeros(d) if z0 is None else np.asarray(z0, dtype=float).copy()
    iters = 0
    if m and (A @ z + c).min() < -FEAS_TOL and warm_active:
        z = _warm_repair(A, c, z, warm_active)
    if m and (A @ z + c).min() < -FEAS_TOL:
        z, iters, violating = _phase_one(A, c, z, cap)
        if violating:
            return QpSolution(z, np.zeros(m), QpStatus.INFEASIBLE, iterations=iters, violating_rows=violating)

    slack = A @ z + c if m else np.zeros(0)
    order = list(warm_active or []) + list(range(m))
    seen: set[int] = set()
    order = [r for r in order if 0 <= r < m and not (r in seen or seen.add(r))]
    work = _initial_work(A, slack, d, order) if d else []

    status, z, lam_w, work, it = _active_set(H, f, A, c, z, work, cap)
    iters += it
    lam = np.zeros(m)
    if status is QpStatus.OPTIMAL and work:
        lam[work] = np.maximum(lam_w, 0.0)
        z, lam = _polish(H, f, A, c, z, lam, work)
    # undo the row scaling
    lam = lam / scale if m else lam
    return QpSolution(z, lam, status, tuple(work), iters)


def _solve_scalar(h: float, f: float, a: Array, c: Array, scale: Array) -> QpSolution:
    """Closed form for one strictly convex variable: clip the minimizer to an interval."""
    m = a.shape[0]
    bound = np.divide(-c, a, out=np.zeros(m), where=a != 0)
    lower, upper = np.flatnonzero(a > 0), np.flatnonzero(a < 0)
    lo_r = int(lower[np.argmax(bound[lower])]) if lower.size else -1
    hi_r = int(upper[np.argmin(bound[upper])]) if upper.size else -1
    lo = bound[lo_r] if lo_r >= 0 else -np.inf
    hi = bound[hi_r] if hi_r >= 0 else np.inf
    if lo > hi + FEAS_TOL:
        return QpSolution(np.array([0.5 * (lo + hi)]), np.zeros(m), QpStatus.INFEASIBLE, violating_rows=tuple(sorted((lo_r, hi_r))))
    z = min(max(-f / h, lo), hi)
    lam = np.zeros(m)
    active: tuple[int, ...] = ()
    grad = h * z + f
    # pick the binding side by the gradient sign; lo and hi may coincide within tolerance
    if lo_r >= 0 and grad > 0 and z <= lo + FEAS_TOL:
        lam[lo_r], active = grad / a[lo_r], (lo_r,)
    elif hi_r >= 0 and grad < 0 and z >= hi - FEAS_TOL:
        lam[hi_r], active = grad / a[hi_r], (hi_r,)
    return QpSolution(np.array([z]), lam / scale, QpStatus.OPTIMAL, active, 1)


def _warm_repair(A: Array, c: Array, z: Array, warm_active: Sequence[int]) -> Array:
    """Project ``z`` onto the warm working set's face; keep it only if that is feasible.

    Saves the phase-1 solve when consecutive problems share their active set.
    """
    rows = [r for r in warm_active if 0 <= r < A.shape[0]]
    if not rows:
        return z
    Aw = A[rows]
    cand = z - np.linalg.lstsq(Aw, Aw @ z + c[rows], rcond=None)[0]
    return cand if (A @ cand + c).min() >= -FEAS_TOL else z


def _polish(H: Array, f: Array, A: Array, c: Array, z: Array, lam: Array, work: list[int]) -> tuple[Array, Array]:
    """Re-solve the equality-constrained KKT system of the final working set."""
    d, k = f.shape[0], len(work)
    Aw = A[work]
    K = np.block([[H, -Aw.T], [Aw, np.zeros((k, k))]])
    rhs = np.concatenate([-f, -c[work]])
    try:
        sol = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError:
        # singular KKT (zero curvature on the face): refine multipliers only
        zr = z - np.linalg.lstsq(Aw, Aw @ z + c[work], rcond=None)[0]
        lw, *_ = np.linalg.lstsq(Aw.T, H @ zr + f, rcond=None)
        sol = np.concatenate([zr, lw])
    z_new, lw = sol[:d], sol[d:]
    lam_new = np.zeros_like(lam)
    lam_new[work] = lw

    def score(zz: Array, ll: Array) -> float:
        s = A @ zz + c
        return max(
            float(np.abs(H @ zz + f - A.T @ ll).max()) if d else 0.0,
            float(max(0.0, -s.min())),
            float(max(0.0, -ll.min())),
        )

    if np.all(np.isfinite(sol)) and score(z_new, lam_new) <= score(z, lam):
        lam_new[work] = np.maximum(lw, 0.0)
        return z_new, lam_new
    return z, lam


def _phase_one(A: Array, c: Array, z: Array, cap: int) -> tuple[Array, int, tuple[int, ...]]:
    """Minimize ``t`` subject to ``A z + c + t >= 0``, ``t >= 0``.

    Returns the feasible point (``t`` dropped), iterations and the rows still
    violated when the optimum ``t`` is positive.
    """
    m, d = A.shape
    t0 = max(0.0, -float((A @ z + c).min()))
    A1 = np.zeros((m + 1, d + 1))
    A1[:m, :d] = A
    A1[:m, d] = 1.0
    A1[m, d] = 1.0
    n1 = np.linalg.norm(A1, axis=1)
    A1 /= n1[:, None]
    c1 = np.concatenate([c, [0.0]]) / n1
    f1 = np.zeros(d + 1)
    f1[d] = 1.0
    H1 = np.zeros((d + 1, d + 1))
    w1 = np.concatenate([z, [t0]])
    work = _initial_work(A1, A1 @ w1 + c1, d + 1, range(m + 1))
    status, w1, _, _, it = _active_set(H1, f1, A1, c1, w1, work, 100 * (d + 1))
    zf, t = w1[:d], w1[d]
    if status is not QpStatus.OPTIMAL or t > FEAS_TOL:
        s = A @ zf + c
        violating = tuple(int(r) for r in np.flatnonzero(s < -FEAS_TOL)) or tuple(int(r) for r in np.flatnonzero(s <= s.min() + 1e-12))
        return zf, it, violating
    return zf, it, ()


def format_qp(p: QuadraticProgram, row_labels: Sequence[str] | None = None) -> str:
    """Plain-text dump: dimensions, H, f, then one ``label: A_row | c`` line per row."""
    lines = [f"dim {p.dim} rows {p.rows}", "H"]
    lines += [" ".join(f"{v:.12g}" for v in row) for row in p.hessian]
    lines.append("f")
    lines.append(" ".join(f"{v:.12g}" for v in p.linear))
    lines.append("A | c  (A z + c >= 0)")
    for r in range(p.rows):
        label = row_labels[r] if row_labels else f"row{r}"
        lines.append(f"{label}: " + " ".join(f"{v:.12g}" for v in p.A[r]) + f" | {p.c[r]:.12g}")
    return "\n".join(lines) + "\n"
