"""Command-line entry point: ``ccbf run | compare | verify | repro-all``.

Exit codes: 0 success, 1 usage, 2 validation, 3 infeasible at runtime,
4 property failure. Failures also print one JSON line to stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from collections.abc import Sequence
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from ccbf.experiments import FIGURES, run_figure, verify_scenario, write_manifest
from ccbf.scenario import BUNDLED, ParseError, ScenarioValidationError, build_system, bundled_scenario, load_scenario, sim_config
from ccbf.sim import Infeasible, Mode, SimulationError, check_forward_invariance, read_csv, run_scenario

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_INFEASIBLE = 3
EXIT_PROPERTY = 4


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # argparse exits with 2 by default
        self.print_usage(sys.stderr)
        _fail(EXIT_USAGE, "usage", message)
        raise SystemExit(EXIT_USAGE)


def _fail(code: int, kind: str, message: str, **extra: object) -> int:
    print(json.dumps({"status": "error", "code": code, "kind": kind, "message": message, **extra}), file=sys.stderr)
    return code


def _resolve(path: str) -> Path:
    """Scenario path, or the name of a bundled scenario."""
    p = Path(path)
    if not p.exists() and p.stem in BUNDLED and p.suffix in ("", ".scenario"):
        return bundled_scenario(p.stem)
    return p


def cmd_run(args: argparse.Namespace) -> int:
    sc = load_scenario(_resolve(args.scenario))
    system, x0 = build_system(sc, controller=args.controller)
    cfg = sim_config(sc, mode=args.mode, rounds=args.rounds, record_rounds=args.rounds_trace or None)
    trace = run_scenario(cfg, system, x0)
    out = Path(args.out or sc.output.dir or f"runs/{sc.name}")
    trace.write_csv(out / "trace.csv")
    if cfg.record_rounds:
        trace.write_rounds_csv(out / "rounds.csv")
    rep = check_forward_invariance(trace, args.tol)
    summary = {
        "scenario": sc.name,
        "mode": cfg.mode.value,
        "controller": args.controller,
        "steps": len(trace.t),
        "agents": {
            str(i): {"min_h": a.min_h, "min_hplus": a.min_hplus, "first_violation": a.first_violation}
            for i, a in rep.agents.items()
        },
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    write_manifest(out, sc.name, {"run": "trace.csv"})
    for i, a in rep.agents.items():
        when = "none" if a.first_violation is None else f"{a.first_violation:.6g}"
        print(f"min h_{i} = {a.min_h:.6e}  min hplus_{i} = {a.min_hplus:.6e}  first violation: {when}")
    print(f"trace written to {out / 'trace.csv'}")
    return EXIT_OK


def _load_run(path: str) -> dict[str, np.ndarray]:
    p = Path(path)
    return read_csv(p / "trace.csv" if p.is_dir() else p)


def cmd_compare(args: argparse.Namespace) -> int:
    a, b = _load_run(args.run_a), _load_run(args.run_b)
    for name, run in ((args.run_a, a), (args.run_b, b)):
        if args.metric not in run:
            return _fail(EXIT_VALIDATION, "validation", f"{name} has no column {args.metric!r}")
    if a["t"].shape != b["t"].shape or not np.allclose(a["t"], b["t"], rtol=0, atol=1e-12):
        return _fail(EXIT_VALIDATION, "validation", "runs do not share a time grid")
    diff = b[args.metric] - a[args.metric]
    if args.out:
        out = Path(args.out)
    else:
        run_b = Path(args.run_b)
        out = (run_b if run_b.is_dir() else run_b.parent) / f"diff_{args.metric}.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w") as fh:
        fh.write(f"t,{args.metric}_diff\n")
        for t, d in zip(a["t"], diff):
            fh.write(f"{float(t)!r},{float(d)!r}\n")
    print(f"{args.metric} difference ({args.run_b} minus {args.run_a}): max {diff.max():.6e}, min {diff.min():.6e}")
    print(f"difference series written to {out}")
    if args.max is not None and diff.max() > args.max:
        above = int((diff > args.max).sum())
        return _fail(EXIT_PROPERTY, "property", f"difference exceeds {args.max:g} at {above} of {diff.size} steps", max=float(diff.max()))
    return EXIT_OK


def cmd_verify(args: argparse.Namespace) -> int:
    sc = load_scenario(_resolve(args.scenario))
    checks, _ = verify_scenario(sc)
    for c in checks:
        print(c.line())
    failed = [c.name for c in checks if not c.passed]
    if failed:
        return _fail(EXIT_PROPERTY, "property", "verification failed", failed=failed)
    return EXIT_OK


def _figure_job(name: str, out: str) -> tuple[str, list[str], bool]:
    res = run_figure(name)
    files = {}
    for label, trace in res.traces.items():
        trace.write_csv(Path(out) / name / f"{label}.csv")
        files[label] = f"{label}.csv"
    write_manifest(Path(out) / name, name, files)
    return name, [c.line() for c in res.checks], res.passed


def thread_cap() -> int:
    """Parallel scenario runs allowed by ``CCBF_SIM_THREADS`` (default 1)."""
    raw = os.environ.get("CCBF_SIM_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def cmd_repro_all(args: argparse.Namespace) -> int:
    names = list(FIGURES)
    workers = min(thread_cap(), len(names))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_figure_job, names, [args.out] * len(names)))
    else:
        results = [_figure_job(n, args.out) for n in names]
    ok = True
    for name, lines, passed in results:
        print(f"[{name}]")
        for line in lines:
            print(f"  {line}")
        ok &= passed
    if not ok:
        return _fail(EXIT_PROPERTY, "property", "some replication assertions failed", figures=[r[0] for r in results if not r[2]])
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ccbf", description="Collaborative safety filters for coupled multi-agent systems.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("run", help="simulate a scenario and write its trace")
    r.add_argument("scenario", help="scenario file, or fig1/fig2/fig3 for a bundled one")
    r.add_argument("--out", help="output directory (default: the scenario's output.dir)")
    r.add_argument("--controller", choices=["zero", "half_sontag"], help="override every agent's virtual controller")
    r.add_argument("--mode", choices=[m.value for m in Mode], help="override the simulation mode")
    r.add_argument("--rounds", type=int, help="override the consensus rounds per control step")
    r.add_argument("--rounds-trace", action="store_true", help="also write per-round consensus diagnostics")
    r.add_argument("--tol", type=float, default=1e-4, help="violation tolerance on h (default 1e-4)")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("compare", help="difference series of one trace column between two runs")
    c.add_argument("run_a", help="run directory or trace CSV (subtrahend)")
    c.add_argument("run_b", help="run directory or trace CSV")
    c.add_argument("--metric", default="u2_min")
    c.add_argument("--out", help="output CSV (default: inside run_b)")
    c.add_argument("--max", type=float, help="fail with exit 4 if the difference ever exceeds this")
    c.set_defaults(func=cmd_compare)

    v = sub.add_parser("verify", help="run a scenario and check its safety and oracle properties")
    v.add_argument("scenario")
    v.set_defaults(func=cmd_verify)

    a = sub.add_parser("repro-all", help="run the bundled scenarios and their assertions")
    a.add_argument("--out", default="runs/repro", help="output directory (default runs/repro)")
    a.set_defaults(func=cmd_repro_all)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ParseError as exc:
        return _fail(EXIT_VALIDATION, "parse", str(exc), line=exc.line)
    except ScenarioValidationError as exc:
        return _fail(EXIT_VALIDATION, "validation", str(exc), errors=[{"path": e.path, "message": e.message} for e in exc.errors])
    except (FileNotFoundError, IsADirectoryError) as exc:
        return _fail(EXIT_USAGE, "usage", str(exc))
    except Infeasible as exc:
        return _fail(EXIT_INFEASIBLE, "infeasible", str(exc), time=exc.time, agent=exc.agent)
    except SimulationError as exc:
        return _fail(EXIT_INFEASIBLE, "simulation", str(exc), time=exc.time)
    except ValueError as exc:
        return _fail(EXIT_VALIDATION, "validation", str(exc))


if __name__ == "__main__":
    raise SystemExit(main())
