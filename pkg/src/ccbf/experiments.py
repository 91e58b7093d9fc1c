"""Replication runs for the three bundled scenarios and per-scenario verification checks."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ccbf.centralized import assemble_centralized
from ccbf.conditions import assemble_all, eval_psi, fd_psi_oracle
from ccbf.qp import kkt_residuals, solve_qp
from ccbf.scenario import ScenarioFile, build_system, bundled_scenario, load_scenario, sim_config
from ccbf.sim import Mode, SimTrace, check_forward_invariance, run_scenario

__all__ = [
    "SAFETY_TOL",
    "Check",
    "FigureResult",
    "fig1",
    "fig2",
    "fig3",
    "run_figure",
    "verify_scenario",
    "write_manifest",
]

#: allowed barrier undershoot from the zero-order hold between control steps
SAFETY_TOL = 1e-4
#: slack for the u2_min ordering between the baseline and altruistic runs
ORDER_SLACK = 1e-9


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    detail: str = ""

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail}"


@dataclass
class FigureResult:
    name: str
    checks: list[Check]
    traces: dict[str, SimTrace] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)


def _safe(label: str, trace: SimTrace) -> Check:
    rep = check_forward_invariance(trace, SAFETY_TOL)
    worst = min(a.min_h for a in rep.agents.values())
    return Check(f"{label} min h >= -{SAFETY_TOL:g}", worst >= -SAFETY_TOL, f"min h = {worst:.3e}")


def _load(sc: ScenarioFile | None, name: str) -> ScenarioFile:
    return sc if sc is not None else load_scenario(bundled_scenario(name))


def fig1(sc: ScenarioFile | None = None) -> FigureResult:
    """Coupled condition enforced by the neighbor versus no intervention."""
    sc = _load(sc, "fig1")
    system, x0 = build_system(sc)
    guarded = run_scenario(sim_config(sc), system, x0)
    free = run_scenario(sim_config(sc, mode=Mode.NO_INTERVENTION), system, x0)
    rep = check_forward_invariance(free, SAFETY_TOL)
    first = [a.first_violation for a in rep.agents.values() if a.first_violation is not None]
    radius = system.agent(2).barrier.radius  # type: ignore[union-attr]
    peak = float(guarded.state(2).max())
    checks = [
        _safe("enforced", guarded),
        Check(f"enforced max x_2 <= r + {SAFETY_TOL:g}", peak <= radius + SAFETY_TOL, f"max x_2 = {peak:.6f}"),
        Check("unfiltered run violates", bool(first), f"first violation at t = {min(first):.4g}" if first else "no violation"),
    ]
    return FigureResult("fig1", checks, {"ccbf": guarded, "no_intervention": free})


def boundary_gap(trace: SimTrace) -> dict[int, float]:
    """``r - |x_i(T)|`` for every barrier agent."""
    out = {}
    for i in trace.h:
        r = trace.system.agent(i).barrier.radius  # type: ignore[union-attr]
        out[i] = float(r - np.linalg.norm(trace.state(i)[-1]))
    return out


def fig2(sc: ScenarioFile | None = None) -> FigureResult:
    """Zero versus half-Sontag virtual controller under distributed enforcement."""
    sc = _load(sc, "fig2")
    traces = {}
    for kind in ("zero", "half_sontag"):
        system, x0 = build_system(sc, controller=kind)
        traces[kind] = run_scenario(sim_config(sc, mode=Mode.DISTRIBUTED_BASE), system, x0)
    gz, gs = boundary_gap(traces["zero"]), boundary_gap(traces["half_sontag"])
    margin = min(gz[i] - gs[i] for i in gz)
    checks = [_safe(f"{k}", t) for k, t in traces.items()]
    detail = ", ".join(f"agent {i}: {gz[i]:.4f} vs {gs[i]:.4f}" for i in sorted(gz))
    checks.append(Check("zero-controller gap exceeds half-Sontag gap by >= 1e-3", margin >= 1e-3, detail))
    return FigureResult("fig2", checks, traces)


def fig3(sc: ScenarioFile | None = None) -> FigureResult:
    """Baseline versus altruistic distributed enforcement, compared through ``u2_min``."""
    sc = _load(sc, "fig3")
    system, x0 = build_system(sc)
    base = run_scenario(sim_config(sc, mode=Mode.DISTRIBUTED_BASE), system, x0)
    alt = run_scenario(sim_config(sc, mode=Mode.DISTRIBUTED_ALTRUISTIC), system, x0)
    diff = alt.u2_min - base.u2_min  # type: ignore[operator]
    t = base.t
    mid = (t >= t[-1] / 3) & (t <= 2 * t[-1] / 3)
    above = np.flatnonzero(diff > ORDER_SLACK)
    checks = [
        _safe("baseline", base),
        _safe("altruistic", alt),
        Check(
            "altruistic u2_min <= baseline u2_min at every step",
            above.size == 0,
            f"max difference {diff.max():.3e}; {above.size} of {diff.size} steps above"
            + (f", first at t = {t[above[0]]:.4g}" if above.size else ""),
        ),
        Check(
            "altruistic u2_min strictly smaller somewhere in the middle third",
            bool(np.any(diff[mid] < -ORDER_SLACK)),
            f"min difference there {diff[mid].min():.3e}",
        ),
    ]
    return FigureResult("fig3", checks, {"baseline": base, "altruistic": alt})


FIGURES = {"fig1": fig1, "fig2": fig2, "fig3": fig3}


def run_figure(name: str) -> FigureResult:
    return FIGURES[name]()


def verify_scenario(sc: ScenarioFile, samples: int = 20) -> tuple[list[Check], SimTrace]:
    """Run ``sc`` and check invariance, condition margins, the coefficient oracle and centralized KKT."""
    system, x0 = build_system(sc)
    cfg = sim_config(sc)
    trace = run_scenario(cfg, system, x0)
    checks = []
    if trace.h:
        checks.append(_safe("forward invariance", trace))
    if cfg.mode is not Mode.NO_INTERVENTION and trace.psi:
        worst = min(float(v.min()) for v in trace.psi.values())
        checks.append(Check("coupled conditions hold at every step", worst >= -1e-6, f"min psi = {worst:.3e}"))
    idx = np.unique(np.linspace(0, len(trace.t) - 1, samples).astype(int))
    rel = 0.0
    kkt = 0.0
    for k in idx:
        x = trace.x[k]
        u = system.unstack_inputs(trace.u[k])
        coeffs = assemble_all(system, x)
        for i, c in coeffs.items():
            exact = eval_psi(c, u)
            fd = fd_psi_oracle(i, system, x, u)
            rel = max(rel, abs(exact - fd) / max(1.0, abs(fd)))
        if coeffs and system.controlled_agents():
            p = assemble_centralized(system, x, coeffs=coeffs)
            sol = solve_qp(p)
            if sol.optimal:
                kkt = max(kkt, max(kkt_residuals(p, sol.z, sol.multipliers).values()))
    if trace.h:
        checks.append(Check("coefficients match finite-difference oracle", rel <= 1e-3, f"max relative error {rel:.2e}"))
        checks.append(Check("centralized solutions satisfy KKT", kkt <= 1e-8, f"max residual {kkt:.2e}"))
    return checks, trace


def write_manifest(directory: str | Path, figure: str, traces: dict[str, str]) -> Path:
    """Per-figure plot manifest naming the trace files and the columns to draw."""
    directory = Path(directory)
    panels = [
        {"title": "states", "x": "t", "y_prefix": "x_"},
        {"title": "inputs", "x": "t", "y_prefix": "u_"},
        {"title": "barrier values", "x": "t", "y_prefix": "h_"},
        {"title": "coupled-condition margins", "x": "t", "y_prefix": "psi_"},
    ]
    if figure == "fig3":
        panels.append({"title": "u2_min: altruistic minus baseline", "x": "t", "y": ["u2_min"], "difference": ["altruistic", "baseline"]})
    data = {"figure": figure, "traces": traces, "panels": panels}
    path = directory / "manifest.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2) + "\n")
    return path
