"""TOML configuration files for single runs and sweeps.

Run config::

    n_particles = 16            # optional when positions are listed
    epsilon = 0.05
    gamma = 1.0
    horizon = 1.5
    delta = 1e-3                # optional, default min(1e-3, 1/N^2)
    saturated_start = "equilibrium"

    [initial]
    positions = [0.0, 0.15, ...]          # N+1 values, or
    density = { breakpoints = [...], values = [...] }   # quantile placement
    velocities = "well_prepared"          # or a number, or N values

    [theta]                     # congestion
    kind = "power_law"          # or "tabulated" with breakpoints/values
    alpha = 2.0
    rho_bar = 1.0

    [zeta]                      # alertness, defaults to [theta]

    [drift]
    kind = "separable"          # "constant" (value) or "tabulated" (times, xs, values)
    lipschitz_x = 0.6           # optional
    [drift.time]
    kind = "constant"           # "sine" (offset, amplitude, frequency, phase) or "tabulated" (xs, ys)
    value = 1.0
    [drift.space]
    kind = "sine"
    offset = 1.0
    amplitude = 0.25
    frequency = 2.0943951023931953

    [leader]
    kind = "constant_speed"     # x0 defaults to the last initial position
    speed = 1.0

Sweep plan: the same ``[theta]``, ``[drift]`` and ``[leader]`` tables, plus ::

    [sweep]
    ns = [50, 100, 200, 400, 800]
    gamma = 1.0
    horizon = 1.5
    grid = 1001
    velocities = "well_prepared"
    fixed_epsilon = 1.0         # many-particle mode
    vanishing_scale = 1.0       # vanishing-inertia mode: eps_N = scale / N^power
    vanishing_power = 1.0

    [density]
    breakpoints = [0.0, 0.5, 1.5, 2.5]
    values = [0.2, 0.5, 0.5, 0.2]

Every problem is reported with the dotted field name and, when it can be
located, the line number.
"""

from __future__ import annotations

import re
import sys
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .errors import ConfigError, ConfigParseError
from .limits import DensityProfile, EpsilonRule, SweepPlan
from .micro_solver import DEFAULT_ATOL, DEFAULT_GRID, DEFAULT_RTOL
from .model import (
    DriftField,
    LeaderTrajectory,
    NonlinearityProfile,
    ParticleSystemConfig,
    Profile1D,
    well_prepared_velocities,
)

_HEADER = re.compile(r"^\s*\[\s*([A-Za-z0-9_.\-]+)\s*\]")
_KEY = re.compile(r"^\s*([A-Za-z0-9_\-]+)\s*=")


def key_lines(text):
    """Map dotted key paths to 1-based line numbers (tables and plain keys)."""
    out = {}
    table = ""
    for lineno, line in enumerate(text.splitlines(), 1):
        m = _HEADER.match(line)
        if m:
            table = m.group(1)
            out.setdefault(table, lineno)
            continue
        m = _KEY.match(line)
        if m:
            out.setdefault(f"{table}.{m.group(1)}" if table else m.group(1), lineno)
    return out


class _Reader:
    """Typed access to a parsed TOML document with located error messages."""

    def __init__(self, data, text, source):
        self.data = data
        self.lines = key_lines(text)
        self.source = source

    def where(self, path):
        parts = path.split(".")
        while parts:
            ln = self.lines.get(".".join(parts))
            if ln is not None:
                return f"{self.source}:{ln}: {path}"
            parts.pop()
        return f"{self.source}: {path}"

    def fail(self, path, msg):
        raise ConfigParseError(f"{self.where(path)}: {msg}", field=path)

    def get(self, path, default=KeyError):
        node = self.data
        for part in path.split("."):
            if not isinstance(node, dict) or part not in node:
                if default is KeyError:
                    self.fail(path, "missing required field")
                return default
            node = node[part]
        return node

    def has(self, path):
        return self.get(path, None) is not None

    def number(self, path, default=KeyError):
        val = self.get(path, default)
        if val is None:
            return None
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            self.fail(path, f"expected a number, got {val!r}")
        return float(val)

    def integer(self, path, default=KeyError):
        val = self.get(path, default)
        if val is None:
            return None
        if isinstance(val, bool) or not isinstance(val, int):
            self.fail(path, f"expected an integer, got {val!r}")
        return int(val)

    def string(self, path, default=KeyError, choices=None):
        val = self.get(path, default)
        if val is None:
            return None
        if not isinstance(val, str):
            self.fail(path, f"expected a string, got {val!r}")
        if choices is not None and val not in choices:
            self.fail(path, f"expected one of {', '.join(choices)}, got {val!r}")
        return val

    def array(self, path, ndim=1, default=KeyError):
        val = self.get(path, default)
        if val is None:
            return None
        try:
            arr = np.array(val, dtype=float)
        except (TypeError, ValueError):
            self.fail(path, "expected an array of numbers")
        if arr.ndim != ndim:
            self.fail(path, f"expected a {ndim}-d array, got shape {arr.shape}")
        return arr

    def table(self, path):
        val = self.get(path)
        if not isinstance(val, dict):
            self.fail(path, "expected a table")
        return val


def _read(path):
    p = Path(path)
    try:
        raw = p.read_bytes()
    except OSError as exc:
        raise ConfigParseError(f"{path}: cannot read ({exc.strerror or exc})") from None
    try:
        text = raw.decode("utf-8")
        data = tomllib.loads(text)
    except UnicodeDecodeError:
        raise ConfigParseError(f"{path}: not UTF-8 text") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigParseError(f"{path}: {exc}") from None
    return _Reader(data, text, str(path))


def _wrap(r, path, fn):
    """Run a builder and relabel its validation errors with the field path."""
    try:
        return fn()
    except ConfigError as exc:
        r.fail(path, "; ".join(exc.errors))
    except (ValueError, TypeError) as exc:
        r.fail(path, str(exc))


def _nonlinearity(r, path, role):
    kind = r.string(f"{path}.kind", choices=("power_law", "tabulated"))
    if kind == "power_law":
        a = r.number(f"{path}.alpha")
        rb = r.number(f"{path}.rho_bar")
        return _wrap(r, path, lambda: NonlinearityProfile.power_law(a, rb, role=role))
    bp = r.array(f"{path}.breakpoints")
    vals = r.array(f"{path}.values")
    return _wrap(r, path, lambda: NonlinearityProfile.tabulated(bp, vals, role=role))


def _profile(r, path):
    kind = r.string(f"{path}.kind", choices=("constant", "sine", "tabulated"))
    if kind == "constant":
        v = r.number(f"{path}.value")
        return _wrap(r, path, lambda: Profile1D.constant(v))
    if kind == "sine":
        args = [r.number(f"{path}.{k}") for k in ("offset", "amplitude", "frequency")]
        phase = r.number(f"{path}.phase", 0.0)
        return _wrap(r, path, lambda: Profile1D.sine(*args, phase=phase))
    xs, ys = r.array(f"{path}.xs"), r.array(f"{path}.ys")
    return _wrap(r, path, lambda: Profile1D.tabulated(xs, ys))


def _drift(r, path="drift"):
    kind = r.string(f"{path}.kind", choices=("constant", "separable", "tabulated"))
    lip = r.number(f"{path}.lipschitz_x", None)
    if kind == "constant":
        v = r.number(f"{path}.value")
        return _wrap(r, path, lambda: DriftField.constant(v, lipschitz_x=lip))
    if kind == "separable":
        tp, sp = _profile(r, f"{path}.time"), _profile(r, f"{path}.space")
        return _wrap(r, path, lambda: DriftField.separable(tp, sp, lipschitz_x=lip))
    if lip is not None:
        r.fail(f"{path}.lipschitz_x", "tabulated drifts compute their own Lipschitz constant")
    t, x, v = r.array(f"{path}.times"), r.array(f"{path}.xs"), r.array(f"{path}.values", ndim=2)
    return _wrap(r, path, lambda: DriftField.tabulated(t, x, v))


def _leader(r, default_x0, path="leader"):
    kind = r.string(f"{path}.kind", choices=("constant_speed", "tabulated"))
    if kind == "constant_speed":
        x0 = r.number(f"{path}.x0", default_x0)
        if x0 is None:
            r.fail(f"{path}.x0", "missing required field")
        speed = r.number(f"{path}.speed")
        return _wrap(r, path, lambda: LeaderTrajectory.constant_speed(x0, speed))
    t, x = r.array(f"{path}.times"), r.array(f"{path}.positions")
    return _wrap(r, path, lambda: LeaderTrajectory.tabulated(t, x))


def _density(r, path):
    bp, vals = r.array(f"{path}.breakpoints"), r.array(f"{path}.values")
    return _wrap(r, path, lambda: DensityProfile(bp, vals))


def load_config(path):
    """Parse a run config into a :class:`ParticleSystemConfig` (not yet validated)."""
    r = _read(path)
    theta = _nonlinearity(r, "theta", "congestion")
    zeta = _nonlinearity(r, "zeta", "alertness") if r.has("zeta") else \
        NonlinearityProfile(theta.kind, theta.alpha, theta.rho_bar, theta.breakpoints, theta.values, "alertness")
    drift = _drift(r)
    n = r.integer("n_particles", None)
    if r.has("initial.positions") == r.has("initial.density"):
        r.fail("initial", "give exactly one of positions or density")
    if r.has("initial.positions"):
        x = r.array("initial.positions")
        if n is None:
            n = x.size - 1
        elif x.size != n + 1:
            r.fail("initial.positions", f"expected N+1 = {n + 1} values, got {x.size}")
    else:
        if n is None:
            r.fail("n_particles", "required with a density placement")
        x = _density(r, "initial.density").placement(n)
    if n < 1:
        r.fail("n_particles", "must be >= 1")
    gamma = r.number("gamma")
    vel = r.get("initial.velocities")
    if isinstance(vel, str):
        if vel != "well_prepared":
            r.fail("initial.velocities", f"expected 'well_prepared', a number or an array, got {vel!r}")
        v = well_prepared_velocities(x, theta, drift, gamma)
    elif isinstance(vel, (int, float)) and not isinstance(vel, bool):
        v = np.full(n, float(vel))
    else:
        v = r.array("initial.velocities")
        if v.size != n:
            r.fail("initial.velocities", f"expected N = {n} values, got {v.size}")
    leader = _leader(r, float(x[-1]))
    return ParticleSystemConfig(
        n_particles=n, epsilon=r.number("epsilon"), gamma=gamma, horizon=r.number("horizon"),
        initial_positions=x, initial_velocities=v, theta=theta, zeta=zeta, drift=drift,
        leader=leader, delta=r.number("delta", None),
        saturated_start=r.string("saturated_start", "equilibrium", choices=("equilibrium", "zero")))


def load_plan(path, mode):
    """Parse a sweep plan; ``mode`` selects the epsilon rule."""
    r = _read(path)
    ns = r.get("sweep.ns")
    if not (isinstance(ns, list) and ns and all(isinstance(k, int) and not isinstance(k, bool) for k in ns)):
        r.fail("sweep.ns", "expected a list of integers")
    if mode == "many_particle":
        rule = _wrap(r, "sweep.fixed_epsilon", lambda: EpsilonRule.fixed(r.number("sweep.fixed_epsilon", 1.0)))
    elif mode == "vanishing_inertia":
        rule = _wrap(r, "sweep.vanishing_scale", lambda: EpsilonRule.vanishing(
            r.number("sweep.vanishing_scale", 1.0), r.number("sweep.vanishing_power", 1.0)))
    else:
        raise ConfigError([f"unknown sweep mode {mode!r}"])
    density = _density(r, "density")
    theta = _nonlinearity(r, "theta", "congestion")
    if r.has("zeta"):
        r.fail("zeta", "sweeps use the congestion profile for both nonlinearities")
    vel = r.get("sweep.velocities", "well_prepared")
    if isinstance(vel, str):
        if vel != "well_prepared":
            r.fail("sweep.velocities", f"expected 'well_prepared' or a profile table, got {vel!r}")
    else:
        vel = _profile(r, "sweep.velocities")
    leader = _leader(r, density.support[1]) if r.has("leader") else None
    return SweepPlan(
        ns=tuple(ns), epsilon=rule, density=density, theta=theta, drift=_drift(r),
        leader_speed=1.0 if leader is None else float(leader.velocity(0.0)), leader=leader,
        gamma=r.number("sweep.gamma", 1.0), horizon=r.number("sweep.horizon", 1.0),
        velocities=vel, grid=r.integer("sweep.grid", DEFAULT_GRID),
        rtol=r.number("sweep.rtol", DEFAULT_RTOL), atol=r.number("sweep.atol", DEFAULT_ATOL),
        delta=r.number("sweep.delta", None), phi=r.string("sweep.phi", "all"))
