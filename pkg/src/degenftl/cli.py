"""Command line entry point.

Exit codes:

====  ==========================================================
0     success, every invariant and identity check passed
1     unexpected internal error
2     unreadable or invalid config, missing input, empty selection
3     particle ordering violated (collision guard reached)
4     solver tolerance or quadrature accuracy not met
5     weak-identity gap above tolerance or remainder bound violated
6     trajectory invariant failed
====  ==========================================================
"""

from __future__ import annotations

import argparse
import logging
import shutil
import sys
import time
from importlib.resources import files
from pathlib import Path

import numpy as np

from . import __version__
from . import io as fio
from .config_io import load_config, load_plan
from .errors import BoundViolated, ConfigError, FtlError, InvariantViolation, MissingInput
from .interpolants import build_fields, mass, norms_and_support, trapezoid
from .limits import MODES, run_sweep
from .micro_solver import (
    DEFAULT_GRID,
    DEFAULT_RTOL,
    IntervalIntegrals,
    TrajectorySet,
    check_invariants,
    solve_system,
)
from .model import validate_config
from .testfunctions import select
from .weak_residuals import WeakFormEngine

log = logging.getLogger("degenftl")

EXIT_OK = 0
EXIT_INTERNAL = 1
STORED_CONFIG = "config.toml"
TRAJECTORY_FILE = "trajectory.csv"
INTEGRALS_FILE = "interval_integrals.npz"


def default_plan_path():
    return files("degenftl") / "data" / "default_plan.toml"


def demo_config_path():
    return files("degenftl") / "data" / "demo_config.toml"


def _tolerances(args):
    rtol = DEFAULT_RTOL if args.tol is None else float(args.tol)
    return rtol, rtol * 1e-3


def _emit(text):
    sys.stdout.write(text if text.endswith("\n") else text + "\n")


def _invariant_table(inv):
    return "\n".join(f"  {name:20s} {'pass' if r['passed'] else 'FAIL'}  {fio.fmt(r['value'])}"
                     for name, r in inv.items())


def _solve_from_args(args):
    cfg = load_config(args.config)
    if args.delta is not None:
        if not args.delta > 0:
            raise ConfigError([f"--delta must be > 0, got {args.delta!r}"])
        cfg = cfg.replace(delta=float(args.delta))
    rtol, atol = _tolerances(args)
    grid = DEFAULT_GRID if args.grid is None else args.grid
    if grid < 2:
        raise ConfigError([f"--grid must be >= 2, got {grid}"])
    return solve_system(cfg, grid, rtol=rtol, atol=atol)


def load_run(run_dir):
    """Rebuild the :class:`TrajectorySet` stored by ``solve`` in ``run_dir``."""
    run_dir = Path(run_dir)
    man = fio.read_manifest(run_dir, "solve")
    cfg_path = run_dir / STORED_CONFIG
    if not cfg_path.is_file():
        raise MissingInput(f"{cfg_path} not found")
    cfg = load_config(cfg_path).replace(delta=float(man["tolerances"]["delta"]))
    vc = validate_config(cfg)
    times, X, V = fio.read_trajectory(run_dir / TRAJECTORY_FILE)
    if X.shape[0] != vc.n_particles + 1:
        raise MissingInput(f"{run_dir}: trajectory has {X.shape[0]} particles, config expects "
                           f"{vc.n_particles + 1}")
    tol = man["tolerances"]
    integrals = None
    if INTEGRALS_FILE in man.get("outputs", ()):
        names, first, second = fio.read_interval_integrals(run_dir / INTEGRALS_FILE, times,
                                                           vc.n_particles)
        if names != IntervalIntegrals.QUANTITIES:
            raise MissingInput(f"{run_dir / INTEGRALS_FILE}: unexpected quantities {names}")
        integrals = IntervalIntegrals(first, second)
    return TrajectorySet(times, X, V, vc, float(tol["rtol"]), float(tol["atol"]), {}, integrals)


# --------------------------------------------------------------- subcommands

def cmd_solve(args):
    t0 = time.perf_counter()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fio.clear_manifest(out, "solve")
    traj = _solve_from_args(args)
    inv = check_invariants(traj)
    shutil.copyfile(args.config, out / STORED_CONFIG)
    fio.write_trajectory(out / TRAJECTORY_FILE, traj)
    fio.write_interval_integrals(out / INTEGRALS_FILE, traj.times, traj.interval_integrals)
    ok = all(r["passed"] for r in inv.values())
    code = EXIT_OK if ok else InvariantViolation.exit_code
    fio.write_manifest(
        out, "solve", config_hash=fio.file_hash(args.config),
        tolerances={"rtol": traj.rtol, "atol": traj.atol, "delta": traj.config.delta,
                    "grid": int(traj.times.size)},
        wall_time=time.perf_counter() - t0, invariants=inv,
        outputs=[STORED_CONFIG, TRAJECTORY_FILE, INTEGRALS_FILE], exit_code=code,
        extra={"stats": traj.stats})
    _emit(f"solved N={traj.n} eps={fio.fmt(traj.config.epsilon)} on {traj.times.size} output times "
          f"({traj.stats['steps']} steps, {traj.stats['rejected']} rejected)")
    _emit(_invariant_table(inv))
    if not ok:
        bad = ", ".join(k for k, r in inv.items() if not r["passed"])
        log.error("invariant check failed: %s", bad)
    return code


def cmd_check(args):
    t0 = time.perf_counter()
    if args.config is not None:
        traj = _solve_from_args(args)
        cfg_hash = fio.file_hash(args.config)
    elif args.out is not None:
        traj = load_run(args.out)
        cfg_hash = fio.file_hash(Path(args.out) / STORED_CONFIG)
    else:
        raise MissingInput("check needs --config or --out pointing at a solved run")
    inv = check_invariants(traj)
    rho = build_fields(traj)[0]
    m = mass(rho)
    inv["unit_mass"] = {"passed": bool(np.max(np.abs(m - 1.0)) <= 1e-12),
                        "value": float(np.max(np.abs(m - 1.0)))}
    ok = all(r["passed"] for r in inv.values())
    code = EXIT_OK if ok else InvariantViolation.exit_code
    _emit(_invariant_table(inv))
    if args.out is not None:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        fio.write_manifest(args.out, "check", config_hash=cfg_hash,
                           tolerances={"rtol": traj.rtol, "atol": traj.atol},
                           wall_time=time.perf_counter() - t0, invariants=inv, outputs=[],
                           exit_code=code)
    return code


def cmd_fields(args):
    t0 = time.perf_counter()
    if args.out is None:
        raise MissingInput("fields needs --out pointing at a solved run")
    out = Path(args.out)
    traj = load_run(out)
    fio.clear_manifest(out, "fields")
    fields = build_fields(traj)
    outputs = []
    summary = []
    for f in fields:
        name = f"field_{f.name}.csv"
        fio.write_field(out / name, f)
        outputs.append(name)
        ns = norms_and_support(f)
        summary += [(f"{f.name}.sup", ns["sup"]),
                    (f"{f.name}.l1_time_integral", trapezoid(ns["l1"], f.times)),
                    (f"{f.name}.l1_max", float(np.max(ns["l1"])))]
    m = mass(fields[0])
    summary.append(("rho.mass_max_deviation", float(np.max(np.abs(m - 1.0)))))
    fio.write_flat_report(out / "fields_summary.txt", summary)
    outputs.append("fields_summary.txt")
    inv = check_invariants(traj)
    fio.write_manifest(out, "fields", config_hash=fio.file_hash(out / STORED_CONFIG),
                       tolerances={"rtol": traj.rtol, "atol": traj.atol},
                       wall_time=time.perf_counter() - t0, invariants=inv, outputs=outputs,
                       exit_code=EXIT_OK)
    for k, v in summary:
        _emit(f"{k} = {fio.fmt(v)}")
    return EXIT_OK


def cmd_residuals(args):
    t0 = time.perf_counter()
    if args.out is None:
        raise MissingInput("residuals needs --out pointing at a solved run")
    out = Path(args.out)
    traj = load_run(out)
    eng = WeakFormEngine(traj)
    try:
        functions = select(eng.default_catalog(), args.phi)
    except ValueError as exc:
        raise ConfigError([str(exc)]) from None
    fio.clear_manifest(out, "residuals")
    reports = [eng.report(phi) for phi in functions]
    fio.write_residuals(out / "residuals.csv", reports)
    inv = {}
    for r in reports:
        inv[f"{r.phi_id}.continuity"] = {"passed": bool(r.gap_cont <= r.tol_cont), "value": r.gap_cont}
        inv[f"{r.phi_id}.momentum"] = {"passed": bool(r.gap_mom <= r.tol_mom), "value": r.gap_mom}
        inv[f"{r.phi_id}.bounds"] = {"passed": bool(r.bounds_ok),
                                     "value": min(r.boundR_slack, r.boundS_slack)}
    failed = [k for k, v in inv.items() if not v["passed"]]
    code = BoundViolated.exit_code if failed else EXIT_OK
    fio.write_manifest(out, "residuals", config_hash=fio.file_hash(out / STORED_CONFIG),
                       tolerances={"identity": {r.phi_id: {"continuity": r.tol_cont, "momentum": r.tol_mom}
                                                for r in reports}},
                       wall_time=time.perf_counter() - t0, invariants=inv,
                       outputs=["residuals.csv"], exit_code=code)
    for r in reports:
        _emit(f"{r.phi_id:12s} gap_cont={r.gap_cont:.3e} (tol {r.tol_cont:.1e})  "
              f"gap_mom={r.gap_mom:.3e} (tol {r.tol_mom:.1e})")
    if failed:
        log.error("checks failed: %s", ", ".join(failed))
    return code


def cmd_sweep(args):
    t0 = time.perf_counter()
    plan_path = args.config if args.config is not None else default_plan_path()
    if args.out is None:
        raise MissingInput("sweep needs --out")
    plan = load_plan(plan_path, args.mode)
    changes = {}
    if args.grid is not None:
        changes["grid"] = args.grid
    if args.tol is not None:
        changes["rtol"], changes["atol"] = _tolerances(args)
    if args.delta is not None:
        changes["delta"] = float(args.delta)
    if args.phi != "all":
        changes["phi"] = args.phi
    if changes:
        plan = plan.replace(**changes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fio.clear_manifest(out, "sweep")
    try:
        report = run_sweep(plan, args.mode, workers=args.workers)
    except ValueError as exc:
        if isinstance(exc, FtlError):
            raise
        raise ConfigError([str(exc)]) from None
    fio.write_sweep(out / "sweep.csv", report)
    summary = report.summary()
    fio.atomic_write_text(out / "summary.txt", summary)
    inv = {}
    for e in report.entries:
        for name, passed in e.invariants.items():
            inv[f"N={e.n}.{name}"] = {"passed": passed, "value": None}
        for r in e.reports:
            ok = r.identities_ok and r.bounds_ok
            inv[f"N={e.n}.{r.phi_id}.identities_and_bounds"] = {
                "passed": bool(ok), "value": max(r.gap_cont / r.tol_cont, r.gap_mom / r.tol_mom)}
    bad_inv = [k for k, v in inv.items() if not v["passed"] and "identities" not in k]
    bad_id = [k for k, v in inv.items() if not v["passed"] and "identities" in k]
    code = InvariantViolation.exit_code if bad_inv else (BoundViolated.exit_code if bad_id else EXIT_OK)
    fio.write_manifest(out, "sweep", config_hash=fio.file_hash(plan_path),
                       tolerances={"rtol": plan.rtol, "atol": plan.atol, "grid": plan.grid},
                       wall_time=time.perf_counter() - t0, invariants=inv,
                       outputs=["sweep.csv", "summary.txt"], exit_code=code,
                       extra={"mode": args.mode, "ns": list(report.ns)})
    _emit(summary)
    if bad_inv or bad_id:
        log.error("checks failed: %s", ", ".join(bad_inv + bad_id))
    return code


# ------------------------------------------------------------------- parsing

def build_parser():
    p = argparse.ArgumentParser(prog="degenftl", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=False):
        sp.add_argument("--config", required=config_required, help="TOML config or plan file")
        sp.add_argument("--out", help="output directory (input run directory for fields/residuals)")
        sp.add_argument("--grid", type=int, help="number of output times")
        sp.add_argument("--tol", type=float, help="relative solver tolerance (absolute is 1e-3 of it)")
        sp.add_argument("--delta", type=float, help="override the regularization delta")
        sp.add_argument("--workers", type=int, default=1, help="worker processes for sweeps")
        sp.add_argument("--phi", default="all", help="test functions: 'all' or comma-separated ids")

    sp = sub.add_parser("solve", help="integrate one config and store the trajectory")
    common(sp, config_required=True)
    sp.set_defaults(func=cmd_solve, needs_out=True)
    sp = sub.add_parser("fields", help="export the piecewise fields of a solved run")
    common(sp)
    sp.set_defaults(func=cmd_fields)
    sp = sub.add_parser("residuals", help="weak-identity residuals of a solved run")
    common(sp)
    sp.set_defaults(func=cmd_residuals)
    sp = sub.add_parser("sweep", help="many-particle or vanishing-inertia sweep")
    common(sp)
    sp.add_argument("--mode", choices=MODES, default="many_particle")
    sp.set_defaults(func=cmd_sweep)
    sp = sub.add_parser("check", help="trajectory invariants only")
    common(sp)
    sp.set_defaults(func=cmd_check)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "needs_out", False) and args.out is None:
        parser.error("--out is required")
    try:
        return args.func(args)
    except FtlError as exc:
        sys.stderr.write(f"error ({type(exc).__name__}): {exc}\n")
        return exc.exit_code
    except KeyboardInterrupt:
        sys.stderr.write("interrupted\n")
        return 130
    except Exception as exc:  # noqa: BLE001 - last-resort reporting
        log.exception("internal error")
        sys.stderr.write(f"internal error: {exc}\n")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
