"""Compare the compiled cascade kernels with the plain-Python fallback.

Each path runs in its own interpreter because the kernel module picks its
mode from DEGENFTL_NO_NUMBA at import time. For every particle count the
child solves the default sweep problem once to warm up (compilation for numba), then
times ``repeat`` further solves and reports the best one. The parent checks
that both paths produce the same trajectories.

    python benchmarks/bench_solver.py --ns 4 8 16 --grid 101
"""

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np


def child(ns, grid, repeat, eps):
    from degenftl import _kernels
    from degenftl.cli import default_plan_path
    from degenftl.config_io import load_plan
    from degenftl.limits import build_config
    from degenftl.micro_solver import solve_system

    plan = load_plan(default_plan_path(), "many_particle")
    rows = []
    for n in ns:
        cfg = build_config(plan, n).replace(epsilon=eps)
        t0 = time.perf_counter()
        traj = solve_system(cfg, grid)
        first = time.perf_counter() - t0
        best = float("inf")
        for _ in range(repeat):
            t0 = time.perf_counter()
            traj = solve_system(cfg, grid)
            best = min(best, time.perf_counter() - t0)
        rows.append({"n": n, "first": first, "best": best, "steps": traj.stats["steps"],
                     "x": traj.positions.tolist(), "v": traj.velocities.tolist()})
    json.dump({"numba": _kernels.USE_NUMBA, "rows": rows}, sys.stdout)


def run_path(flag, args):
    env = dict(os.environ, DEGENFTL_NO_NUMBA=flag)
    cmd = [sys.executable, __file__, "--child", "--ns", *map(str, args.ns), "--grid", str(args.grid),
           "--repeat", str(args.repeat), "--eps", str(args.eps)]
    res = subprocess.run(cmd, env=env, capture_output=True, text=True, check=True)
    return json.loads(res.stdout)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--ns", type=int, nargs="+", default=[4, 8, 16])
    ap.add_argument("--grid", type=int, default=101)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--eps", type=float, default=0.05)
    ap.add_argument("--child", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args(argv)
    if args.child:
        child(args.ns, args.grid, args.repeat, args.eps)
        return 0

    fast = run_path("0", args)
    slow = run_path("1", args)
    if not fast["numba"] or slow["numba"]:
        print("warning: environment flag did not select the expected kernel paths", file=sys.stderr)
    print(f"{'N':>5} {'steps':>9} {'numba s':>10} {'compile s':>10} {'python s':>10} "
          f"{'speedup':>8} {'max |dx|':>10} {'max |dv|':>10}")
    for a, b in zip(fast["rows"], slow["rows"]):
        dx = float(np.max(np.abs(np.array(a["x"]) - np.array(b["x"]))))
        dv = float(np.max(np.abs(np.array(a["v"]) - np.array(b["v"]))))
        print(f"{a['n']:>5} {a['steps']:>9} {a['best']:>10.4f} {a['first'] - a['best']:>10.3f} "
              f"{b['best']:>10.4f} {b['best'] / a['best']:>8.1f} {dx:>10.1e} {dv:>10.1e}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
