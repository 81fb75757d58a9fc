"""CSV and manifest files.

Numbers are written with 17 significant digits so a float64 survives the round
trip exactly. Every file is written to a temporary name and renamed into
place; the run manifest is always the last file written, so its presence marks
a completed command.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
import time
from pathlib import Path

import numpy as np

from . import __version__
from .errors import MissingInput

TRAJECTORY_COLUMNS = ("t", "i", "x", "v")
FIELD_COLUMNS = ("t", "cell_index", "x_left", "x_right", "value")
RESIDUAL_COLUMNS = ("phi_id", "identity", "N", "eps", "lhs_cont", "R_over_N", "gap_cont",
                    "lhs_mom", "S_over_N", "gap_mom", "boundR_slack", "boundS_slack",
                    "delta_defect")


def fmt(value):
    """``%.17g`` for floats, plain text otherwise, empty for None."""
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return "%.17g" % float(value)
    return str(value)


def atomic_write_text(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise
    return path


def write_csv(path, columns, rows):
    lines = [",".join(columns)]
    lines.extend(",".join(fmt(v) for v in row) for row in rows)
    return atomic_write_text(path, "\n".join(lines) + "\n")


def file_hash(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -------------------------------------------------------------- trajectories

def trajectory_rows(traj):
    x, v, t = traj.positions, traj.velocities, traj.times
    for k in range(t.size):
        for i in range(x.shape[0]):
            yield t[k], i, x[i, k], v[i, k]


def write_trajectory(path, traj):
    return write_csv(path, TRAJECTORY_COLUMNS, trajectory_rows(traj))


def read_trajectory(path):
    """Return ``(times, positions (N+1, M), velocities (N+1, M))``."""
    path = Path(path)
    if not path.is_file():
        raise MissingInput(f"trajectory file {path} not found")
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if tuple(header) != TRAJECTORY_COLUMNS:
            raise MissingInput(f"{path}: unexpected header {header}")
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    idx = data[:, 1].astype(int)
    n1 = int(idx.max()) + 1
    if data.shape[0] % n1:
        raise MissingInput(f"{path}: row count {data.shape[0]} is not a multiple of N+1 = {n1}")
    m = data.shape[0] // n1
    block = data.reshape(m, n1, 4)
    if not np.array_equal(block[:, :, 1], np.broadcast_to(np.arange(n1), (m, n1))):
        raise MissingInput(f"{path}: particle indexes out of order")
    times = block[:, 0, 0].copy()
    if not np.all(block[:, :, 0] == times[:, None]):
        raise MissingInput(f"{path}: inconsistent time column")
    return times, block[:, :, 2].T.copy(), block[:, :, 3].T.copy()


def write_interval_integrals(path, times, integrals):
    """Store the solver's per-interval cell integrals next to the trajectory."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent, suffix=".npz")
    os.close(fd)
    try:
        np.savez(tmp, times=times, first=integrals.first, second=integrals.second,
                 quantities=np.array(integrals.QUANTITIES))
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise
    return path


def read_interval_integrals(path, times, n):
    """Return ``(first, second)`` from ``path`` or raise MissingInput when the
    file does not match the trajectory on ``times`` with ``n`` cells."""
    try:
        with np.load(path) as data:
            stored_t, first, second = data["times"], data["first"], data["second"]
            names = tuple(str(q) for q in data["quantities"])
    except (OSError, KeyError, ValueError) as exc:
        raise MissingInput(f"cannot read {path}: {exc}") from exc
    shape = (len(names), n, times.size - 1)
    if not np.array_equal(stored_t, times) or first.shape != shape or second.shape != shape:
        raise MissingInput(f"{path} does not match the stored trajectory")
    return names, first, second


# -------------------------------------------------------------------- fields

def field_rows(field):
    bp = field.breakpoints
    for k, t in enumerate(field.times):
        for i in range(bp.shape[1] - 1):
            row = [t, i, bp[k, i], bp[k, i + 1], field.values[k, i]]
            if field.slopes is not None:
                row.append(field.slopes[k, i])
            yield row


def write_field(path, field):
    cols = FIELD_COLUMNS + (("slope",) if field.slopes is not None else ())
    return write_csv(path, cols, field_rows(field))


def write_flat_report(path, items):
    """``key = value`` lines."""
    return atomic_write_text(path, "".join(f"{k} = {fmt(v)}\n" for k, v in items))


# ----------------------------------------------------------------- residuals

def residual_rows(reports):
    """Two rows per report, the density identity then the momentum identity.

    Columns that belong to the other identity are left empty.
    """
    for r in reports:
        yield [r.phi_id, "continuity", r.N, r.eps, r.lhs_cont, r.R_over_N, r.gap_cont,
               None, None, None, r.boundR_slack, None, None]
        yield [r.phi_id, "momentum", r.N, r.eps, None, None, None,
               r.lhs_mom, r.S_over_N, r.gap_mom, None, r.boundS_slack, r.delta_defect]


def write_residuals(path, reports):
    return write_csv(path, RESIDUAL_COLUMNS, residual_rows(reports))


# --------------------------------------------------------------------- sweep

def sweep_columns(vanishing):
    cols = ["N", "eps", "phi_id", "pairing_rho", "pairing_e1", "pairing_e2", "pairing_lambda"]
    if vanishing:
        cols.append("g_gap")
    cols.append("cauchy_diff")
    return tuple(cols)


def write_sweep(path, report):
    vanishing = report.mode == "vanishing_inertia"

    def rows():
        for r in report.rows:
            row = [r.N, r.eps, r.phi_id, r.pairing_rho, r.pairing_e1, r.pairing_e2, r.pairing_lambda]
            if vanishing:
                row.append(r.g_gap)
            row.append(r.cauchy_diff)
            yield row

    return write_csv(path, sweep_columns(vanishing), rows())


# ------------------------------------------------------------------ manifest

def manifest_path(out_dir, subcommand):
    return Path(out_dir) / f"manifest.{subcommand}.json"


def clear_manifest(out_dir, subcommand):
    """Remove a stale completion marker before a command starts writing."""
    try:
        manifest_path(out_dir, subcommand).unlink()
    except FileNotFoundError:
        pass


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if np.isfinite(f) else str(f)
    return obj


def write_manifest(out_dir, subcommand, *, config_hash, tolerances, wall_time, invariants,
                   outputs, exit_code, extra=None):
    """Write the run manifest; every listed output must already exist."""
    out_dir = Path(out_dir)
    missing = [o for o in outputs if not (out_dir / o).is_file()]
    if missing:
        raise MissingInput(f"cannot finalize manifest, outputs missing: {', '.join(missing)}")
    doc = {
        "subcommand": subcommand,
        "tool_version": __version__,
        "config_hash": config_hash,
        "tolerances": tolerances,
        "wall_time_s": wall_time,
        "invariants": invariants,
        "outputs": list(outputs),
        "exit_code": exit_code,
        "finished_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    if extra:
        doc.update(extra)
    text = json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n"
    return atomic_write_text(manifest_path(out_dir, subcommand), text)


def read_manifest(out_dir, subcommand):
    p = manifest_path(out_dir, subcommand)
    if not p.is_file():
        raise MissingInput(f"{p} not found (run `{subcommand}` first, or it did not complete)")
    return json.loads(p.read_text())
