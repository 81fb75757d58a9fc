"""Model ingredients: nonlinearities, drift, leader, and validated initial data."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.interpolate import PchipInterpolator

from . import _kernels as K
from .errors import ConfigError, DegenerateGap, InvalidDensity

# relative slack used when comparing densities against thresholds
THRESHOLD_RTOL = 1e-12


def _frozen(a, dtype=float):
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


def density_of_gap(gap, n):
    """Local density ``1 / (n * gap)``; raises DegenerateGap for gap <= 0."""
    if n < 1:
        raise ValueError("n must be >= 1")
    g = np.asarray(gap, dtype=float)
    if np.any(~(g > 0)):
        raise DegenerateGap(f"nonpositive gap {float(np.min(g))!r}")
    out = 1.0 / (n * g)
    return float(out) if out.ndim == 0 else out


# --------------------------------------------------------------- nonlinearity


@dataclass(frozen=True, eq=False)
class NonlinearityProfile:
    """Nonincreasing function of density vanishing exactly from ``rho_bar`` on.

    Use :meth:`power_law` or :meth:`tabulated` to build one.
    """

    kind: str
    alpha: float = 1.0
    rho_bar: float = 1.0
    breakpoints: np.ndarray = field(default_factory=lambda: _frozen([0.0, 1.0]))
    values: np.ndarray = field(default_factory=lambda: _frozen([1.0, 0.0]))
    role: str = "congestion"

    @classmethod
    def power_law(cls, alpha, rho_bar, role="congestion"):
        alpha = float(alpha)
        rho_bar = float(rho_bar)
        if not alpha >= 1.0:
            raise ConfigError([f"power law exponent must be >= 1, got {alpha}"])
        if not rho_bar > 0.0:
            raise ConfigError([f"rho_bar must be > 0, got {rho_bar}"])
        return cls("powerlaw", alpha, rho_bar, _frozen([0.0, rho_bar]), _frozen([1.0, 0.0]), role)

    @classmethod
    def tabulated(cls, breakpoints, values, role="congestion"):
        """Piecewise-linear table; the last breakpoint is the threshold and
        must carry the only zero value."""
        bp = np.asarray(breakpoints, dtype=float)
        vals = np.asarray(values, dtype=float)
        errs = []
        if bp.ndim != 1 or bp.shape != vals.shape or bp.size < 2:
            raise ConfigError(["tabulated nonlinearity needs matching 1-D arrays of length >= 2"])
        if bp[0] != 0.0:
            errs.append("tabulated nonlinearity must start at density 0")
        if np.any(np.diff(bp) <= 0):
            errs.append("tabulated breakpoints must be strictly increasing")
        if np.any(np.diff(vals) > 0):
            errs.append("tabulated values must be nonincreasing")
        if vals[-1] != 0.0:
            errs.append("tabulated values must end with 0 at the threshold")
        if np.any(vals[:-1] <= 0):
            errs.append("tabulated values must be positive below the threshold")
        if errs:
            raise ConfigError(errs)
        return cls("tabulated", 1.0, float(bp[-1]), _frozen(bp), _frozen(vals), role)

    @property
    def max_value(self):
        """Maximum over ``[0, rho_bar]`` (attained at 0)."""
        return 1.0 if self.kind == "powerlaw" else float(self.values[0])

    def pack(self):
        kind = 0 if self.kind == "powerlaw" else 1
        return (kind, float(self.alpha), float(self.rho_bar),
                np.ascontiguousarray(self.breakpoints), np.ascontiguousarray(self.values))

    def __call__(self, rho):
        return evaluate_nonlinearity(self, rho)


def evaluate_nonlinearity(profile: NonlinearityProfile, rho):
    r = np.asarray(rho, dtype=float)
    if np.any(r < 0) or np.any(np.isnan(r)):
        raise InvalidDensity("density must be nonnegative")
    if profile.kind == "powerlaw":
        out = np.where(r >= profile.rho_bar, 0.0,
                       np.clip(1.0 - r / profile.rho_bar, 0.0, None) ** profile.alpha)
    else:
        out = np.where(r >= profile.rho_bar, 0.0,
                       np.interp(r, profile.breakpoints, profile.values))
    return float(out) if out.ndim == 0 else out


# ------------------------------------------------------------------ profiles


@dataclass(frozen=True, eq=False)
class Profile1D:
    """Scalar function of one variable: constant, sinusoid or clamped table."""

    kind: str
    params: tuple = (0.0, 0.0, 0.0, 0.0)
    xs: np.ndarray = field(default_factory=lambda: _frozen([0.0, 1.0]))
    ys: np.ndarray = field(default_factory=lambda: _frozen([0.0, 0.0]))

    @classmethod
    def constant(cls, value):
        return cls("constant", (float(value), 0.0, 0.0, 0.0))

    @classmethod
    def sine(cls, offset, amplitude, frequency, phase=0.0):
        """``offset + amplitude * sin(frequency * u + phase)``."""
        return cls("sine", (float(offset), float(amplitude), float(frequency), float(phase)))

    @classmethod
    def tabulated(cls, xs, ys):
        xs = np.asarray(xs, dtype=float)
        ys = np.asarray(ys, dtype=float)
        if xs.ndim != 1 or xs.shape != ys.shape or xs.size < 2:
            raise ConfigError(["tabulated profile needs matching 1-D arrays of length >= 2"])
        if np.any(np.diff(xs) <= 0):
            raise ConfigError(["tabulated profile abscissae must be strictly increasing"])
        return cls("tabulated", (0.0, 0.0, 0.0, 0.0), _frozen(xs), _frozen(ys))

    def __call__(self, u):
        u = np.asarray(u, dtype=float)
        p0, p1, p2, p3 = self.params
        if self.kind == "constant":
            out = np.full(u.shape, p0)
        elif self.kind == "sine":
            out = p0 + p1 * np.sin(p2 * u + p3)
        else:
            out = np.interp(u, self.xs, self.ys)
        return float(out) if out.ndim == 0 else out

    def derivative(self, u):
        u = np.asarray(u, dtype=float)
        p0, p1, p2, p3 = self.params
        if self.kind == "constant":
            out = np.zeros(u.shape)
        elif self.kind == "sine":
            out = p1 * p2 * np.cos(p2 * u + p3)
        else:
            slopes = np.diff(self.ys) / np.diff(self.xs)
            j = np.clip(np.searchsorted(self.xs, u, side="right") - 1, 0, slopes.size - 1)
            out = np.where((u < self.xs[0]) | (u >= self.xs[-1]), 0.0, slopes[j])
        return float(out) if out.ndim == 0 else out

    def _extreme_points(self, a, b):
        pts = [a, b]
        p0, p1, p2, p3 = self.params
        if self.kind == "sine" and p2 != 0.0 and p1 != 0.0:
            # critical points p2*u + p3 = pi/2 + k*pi
            lo, hi = sorted((p2 * a + p3, p2 * b + p3))
            k0 = math.ceil((lo - math.pi / 2) / math.pi)
            k1 = math.floor((hi - math.pi / 2) / math.pi)
            for k in range(k0, min(k1, k0 + 10_000) + 1):
                pts.append((math.pi / 2 + k * math.pi - p3) / p2)
        elif self.kind == "tabulated":
            pts.extend(x for x in self.xs if a < x < b)
        return np.asarray(pts, dtype=float)

    def bounds(self, a, b):
        """Exact (min, max) over ``[a, b]``."""
        vals = self(self._extreme_points(float(a), float(b)))
        return float(np.min(vals)), float(np.max(vals))

    def sup_abs(self):
        """Supremum of ``|f|`` over the whole real line."""
        p0, p1, _, _ = self.params
        if self.kind == "constant":
            return abs(p0)
        if self.kind == "sine":
            return abs(p0) + abs(p1)
        return float(np.max(np.abs(self.ys)))

    def lipschitz(self):
        p0, p1, p2, _ = self.params
        if self.kind == "constant":
            return 0.0
        if self.kind == "sine":
            return abs(p1 * p2)
        return float(np.max(np.abs(np.diff(self.ys) / np.diff(self.xs))))

    def pack(self):
        code = {"constant": 0, "sine": 1, "tabulated": 2}[self.kind]
        return (code, *(float(p) for p in self.params),
                np.ascontiguousarray(self.xs), np.ascontiguousarray(self.ys))


# --------------------------------------------------------------------- drift


@dataclass(frozen=True, eq=False)
class DriftField:
    """Positive external drift ``F(t, x)``."""

    kind: str
    time_profile: Profile1D = field(default_factory=lambda: Profile1D.constant(1.0))
    space_profile: Profile1D = field(default_factory=lambda: Profile1D.constant(1.0))
    grid_t: np.ndarray = field(default_factory=lambda: _frozen([0.0, 1.0]))
    grid_x: np.ndarray = field(default_factory=lambda: _frozen([0.0, 1.0]))
    grid_values: np.ndarray = field(default_factory=lambda: _frozen(np.ones((2, 2))))
    lipschitz_supplied: Optional[float] = None

    @classmethod
    def constant(cls, value, lipschitz_x=None):
        return cls("constant", Profile1D.constant(value), Profile1D.constant(1.0),
                   lipschitz_supplied=lipschitz_x)

    @classmethod
    def separable(cls, time_profile, space_profile, lipschitz_x=None):
        return cls("separable", time_profile, space_profile, lipschitz_supplied=lipschitz_x)

    @classmethod
    def tabulated(cls, times, xs, values):
        t = np.asarray(times, dtype=float)
        x = np.asarray(xs, dtype=float)
        v = np.asarray(values, dtype=float)
        if t.ndim != 1 or x.ndim != 1 or t.size < 2 or x.size < 2 or v.shape != (t.size, x.size):
            raise ConfigError(["tabulated drift needs times (nt), xs (nx) and values (nt, nx)"])
        if np.any(np.diff(t) <= 0) or np.any(np.diff(x) <= 0):
            raise ConfigError(["tabulated drift grids must be strictly increasing"])
        return cls("tabulated", grid_t=_frozen(t), grid_x=_frozen(x), grid_values=_frozen(v))

    def __call__(self, t, x):
        t, x = np.broadcast_arrays(np.asarray(t, dtype=float), np.asarray(x, dtype=float))
        if self.kind == "constant":
            out = np.full(t.shape, self.time_profile.params[0])
        elif self.kind == "separable":
            out = np.asarray(self.time_profile(t)) * np.asarray(self.space_profile(x))
        else:
            flat = K.drift_eval_array(self.pack(), np.ascontiguousarray(t.ravel()),
                                      np.ascontiguousarray(x.ravel()))
            out = flat.reshape(t.shape)
        return float(out) if out.ndim == 0 else out

    def dx(self, t, x):
        """Derivative in ``x`` (piecewise for tables)."""
        t, x = np.broadcast_arrays(np.asarray(t, dtype=float), np.asarray(x, dtype=float))
        if self.kind == "constant":
            out = np.zeros(t.shape)
        elif self.kind == "separable":
            out = np.asarray(self.time_profile(t)) * np.asarray(self.space_profile.derivative(x))
        else:
            h = 1e-7 * max(1.0, float(np.ptp(self.grid_x)))
            out = (self(t, x + h) - self(t, x - h)) / (2 * h)
        return float(out) if np.ndim(out) == 0 else out

    @property
    def computed_lipschitz(self):
        if self.kind == "constant":
            return 0.0
        if self.kind == "separable":
            return self.time_profile.sup_abs() * self.space_profile.lipschitz()
        slopes = np.diff(self.grid_values, axis=1) / np.diff(self.grid_x)[None, :]
        return float(np.max(np.abs(slopes)))

    @property
    def lipschitz_x(self):
        if self.lipschitz_supplied is not None:
            return float(self.lipschitz_supplied)
        return self.computed_lipschitz

    def bounds(self, t0, t1, x0, x1):
        """Exact (min, max) of F over the box ``[t0,t1] x [x0,x1]``."""
        if self.kind == "constant":
            v = self.time_profile.params[0]
            return v, v
        if self.kind == "separable":
            g = self.time_profile.bounds(t0, t1)
            h = self.space_profile.bounds(x0, x1)
            prods = [a * b for a in g for b in h]
            return min(prods), max(prods)
        tt = np.unique(np.concatenate([[t0, t1], self.grid_t[(self.grid_t > t0) & (self.grid_t < t1)]]))
        xx = np.unique(np.concatenate([[x0, x1], self.grid_x[(self.grid_x > x0) & (self.grid_x < x1)]]))
        T, X = np.meshgrid(tt, xx, indexing="ij")
        vals = self(T, X)
        return float(np.min(vals)), float(np.max(vals))

    def pack(self):
        code = {"constant": 0, "separable": 1, "tabulated": 2}[self.kind]
        return (code, *self.time_profile.pack(), *self.space_profile.pack(),
                np.ascontiguousarray(self.grid_t), np.ascontiguousarray(self.grid_x),
                np.ascontiguousarray(self.grid_values))


# -------------------------------------------------------------------- leader


@dataclass(frozen=True, eq=False)
class LeaderTrajectory:
    """Prescribed trajectory of the front particle, C^1 through Hermite nodes."""

    kind: str
    times: np.ndarray
    positions: np.ndarray
    slopes: np.ndarray
    speed: float = 0.0

    @classmethod
    def constant_speed(cls, x0, speed):
        speed = float(speed)
        if not speed > 0:
            raise ConfigError([f"leader speed must be > 0, got {speed}"])
        return cls("constant_speed", _frozen([0.0, 1.0]), _frozen([x0, x0 + speed]),
                   _frozen([speed, speed]), speed)

    @classmethod
    def tabulated(cls, times, positions):
        t = np.asarray(times, dtype=float)
        x = np.asarray(positions, dtype=float)
        if t.ndim != 1 or t.shape != x.shape or t.size < 2:
            raise ConfigError(["tabulated leader needs matching 1-D arrays of length >= 2"])
        if t[0] != 0.0 or np.any(np.diff(t) <= 0):
            raise ConfigError(["tabulated leader times must start at 0 and increase strictly"])
        if np.any(np.diff(x) <= 0):
            raise ConfigError(["tabulated leader positions must increase strictly"])
        slopes = PchipInterpolator(t, x).derivative()(t)
        return cls("tabulated", _frozen(t), _frozen(x), _frozen(slopes))

    def nodes(self, horizon):
        """Hermite nodes ``(t, x, v)`` covering ``[0, horizon]``."""
        if self.kind == "constant_speed":
            x0 = float(self.positions[0])
            t = np.array([0.0, horizon])
            return t, x0 + self.speed * t, np.full(2, self.speed)
        return (np.array(self.times), np.array(self.positions), np.array(self.slopes))

    def _eval(self, t, deriv):
        t = np.asarray(t, dtype=float)
        if self.kind == "constant_speed":
            out = np.full(t.shape, self.speed) if deriv else self.positions[0] + self.speed * t
        else:
            ts, xs, vs = self.times, self.positions, self.slopes
            j = np.clip(np.searchsorted(ts, t, side="right") - 1, 0, ts.size - 2)
            h = ts[j + 1] - ts[j]
            s = (t - ts[j]) / h
            if deriv:
                out = ((6 * s * s - 6 * s) * (xs[j] - xs[j + 1]) / h
                       + (3 * s * s - 4 * s + 1) * vs[j] + (3 * s * s - 2 * s) * vs[j + 1])
            else:
                om = 1 - s
                out = ((1 + 2 * s) * om * om * xs[j] + s * om * om * h * vs[j]
                       + s * s * (3 - 2 * s) * xs[j + 1] + s * s * (s - 1) * h * vs[j + 1])
        return float(out) if out.ndim == 0 else out

    def position(self, t):
        return self._eval(t, False)

    def velocity(self, t):
        return self._eval(t, True)

    def speed_bounds(self, horizon):
        """(min over (0,T] at nodes and vertices, sup over [0,T]) of the derivative."""
        if self.kind == "constant_speed":
            return self.speed, self.speed
        ts, xs, vs = self.times, self.positions, self.slopes
        cand = [t for t in ts if t <= horizon]
        for j in range(ts.size - 1):
            if ts[j] >= horizon:
                break
            h = ts[j + 1] - ts[j]
            m = (xs[j + 1] - xs[j]) / h
            # derivative is a quadratic in s: A s^2 + B s + v0
            A = 3 * vs[j] + 3 * vs[j + 1] - 6 * m
            B = 6 * m - 4 * vs[j] - 2 * vs[j + 1]
            if A != 0:
                s = -B / (2 * A)
                if 0 < s < 1:
                    cand.append(ts[j] + s * h)
        cand.append(horizon)
        vals = np.asarray(self.velocity(np.asarray(cand)))
        return float(np.min(vals)), float(np.max(vals))


# -------------------------------------------------------------------- config

SATURATED_START_CHOICES = ("equilibrium", "zero")


def default_delta(n):
    return min(1e-3, 1.0 / (n * n))


@dataclass(frozen=True, eq=False)
class ParticleSystemConfig:
    n_particles: int
    epsilon: float
    gamma: float
    horizon: float
    initial_positions: np.ndarray
    initial_velocities: np.ndarray
    theta: NonlinearityProfile
    zeta: NonlinearityProfile
    drift: DriftField
    leader: LeaderTrajectory
    delta: Optional[float] = None
    saturated_start: str = "equilibrium"

    def __post_init__(self):
        object.__setattr__(self, "initial_positions", _frozen(self.initial_positions))
        object.__setattr__(self, "initial_velocities", _frozen(self.initial_velocities))

    @property
    def effective_delta(self):
        return default_delta(self.n_particles) if self.delta is None else float(self.delta)

    def replace(self, **changes):
        kw = {f: getattr(self, f) for f in self.__dataclass_fields__}
        kw.update(changes)
        return ParticleSystemConfig(**kw)


@dataclass(frozen=True, eq=False)
class ValidatedConfig:
    """A config that passed every check, plus the quantities derived from it."""

    config: ParticleSystemConfig
    delta: float
    rho0: np.ndarray
    saturated: tuple
    vtilde: np.ndarray
    start_velocities: np.ndarray
    max_drift: float
    min_drift: float
    velocity_bound: float
    particle_bounds: np.ndarray
    s: float
    S: float
    leader_speed_max: float
    gap_min: float

    # convenience pass-throughs
    def __getattr__(self, name):
        if name == "config":
            raise AttributeError(name)
        return getattr(self.config, name)


def _rel_ge(a, b):
    return a >= b * (1.0 - THRESHOLD_RTOL)


def validate_config(config):
    """Check every invariant of a :class:`ParticleSystemConfig`.

    Returns a :class:`ValidatedConfig`. Passing an already validated config
    returns it unchanged. Raises :class:`ConfigError` carrying the full list
    of problems otherwise.
    """
    if isinstance(config, ValidatedConfig):
        return config
    errs = []
    n = config.n_particles
    if not isinstance(n, (int, np.integer)) or n < 1:
        raise ConfigError([f"n_particles must be an integer >= 1, got {n!r}"])
    for name in ("epsilon", "gamma", "horizon"):
        val = getattr(config, name)
        if not (isinstance(val, (int, float, np.floating)) and math.isfinite(val) and val > 0):
            errs.append(f"{name} must be a finite number > 0, got {val!r}")
    delta = config.effective_delta
    if not (math.isfinite(delta) and delta > 0):
        errs.append(f"delta must be > 0, got {delta!r}")
    if config.saturated_start not in SATURATED_START_CHOICES:
        errs.append(f"saturated_start must be one of {SATURATED_START_CHOICES}")
    x = config.initial_positions
    v = config.initial_velocities
    if x.shape != (n + 1,):
        errs.append(f"initial_positions must have length N+1 = {n + 1}, got {x.shape}")
    if v.shape != (n,):
        errs.append(f"initial_velocities must have length N = {n}, got {v.shape}")
    th, ze = config.theta, config.zeta
    if ze.rho_bar > th.rho_bar * (1 + THRESHOLD_RTOL):
        errs.append(f"zeta threshold {ze.rho_bar} exceeds theta threshold {th.rho_bar}")
    if errs:
        raise ConfigError(errs)

    T = float(config.horizon)
    gaps = np.diff(x)
    for i in np.nonzero(~(gaps > 0))[0]:
        errs.append(f"positions not strictly ordered at index {i}: x[{i}]={float(x[i])!r} >= x[{i + 1}]={float(x[i + 1])!r}")
    if errs:
        raise ConfigError(errs)
    rho0 = 1.0 / (n * gaps)
    for i in np.nonzero(rho0 > th.rho_bar * (1 + THRESHOLD_RTOL))[0]:
        errs.append(f"initial density at index {i} is {float(rho0[i])!r} > theta threshold {th.rho_bar}")
    saturated = tuple(int(i) for i in np.nonzero(_rel_ge(rho0, ze.rho_bar))[0])
    sat_mask = np.zeros(n, dtype=bool)
    sat_mask[list(saturated)] = True
    for i in np.nonzero(~sat_mask & ~(v >= 0))[0]:
        errs.append(f"initial velocity at index {i} must be finite and >= 0, got {float(v[i])!r}")

    lead = config.leader
    xl0 = lead.position(0.0)
    if abs(xl0 - x[n]) > 1e-12 * max(1.0, abs(x[n])):
        errs.append(f"leader starts at {xl0!r} but x_N^0 = {x[n]!r}")
    vmin, vmax = lead.speed_bounds(T)
    if not vmin > 0:
        errs.append(f"leader speed must be > 0 on (0, T], minimum found {vmin!r}")
    if lead.kind == "tabulated" and lead.times[-1] < T:
        errs.append(f"tabulated leader ends at {lead.times[-1]} before horizon {T}")

    drift = config.drift
    s = float(x[0])
    S = float(lead.position(T))
    fmin, fmax = drift.bounds(0.0, T, s, S)
    if drift.kind == "separable":
        gmin = drift.time_profile.bounds(0.0, T)[0]
        hmin = drift.space_profile.bounds(s, S)[0]
        if not (gmin > 0 and hmin > 0):
            errs.append("separable drift needs positive time and space factors")
    if not fmin > 0:
        errs.append(f"drift must be positive on [0,T] x [s,S], minimum found {fmin!r}")
    if drift.lipschitz_supplied is not None:
        if drift.lipschitz_supplied < drift.computed_lipschitz * (1 - 1e-9):
            errs.append(f"supplied drift Lipschitz constant {drift.lipschitz_supplied} is below "
                        f"the computed value {drift.computed_lipschitz}")
    if errs:
        raise ConfigError(errs)

    vtilde = np.where(sat_mask, 0.0, v)
    start = np.array(vtilde)
    if saturated and config.saturated_start == "equilibrium":
        idx = np.asarray(saturated)
        start[idx] = th(rho0[idx]) * drift(0.0, x[idx]) / config.gamma
    cap = th.max_value * fmax / config.gamma
    return ValidatedConfig(
        config=config,
        delta=delta,
        rho0=_frozen(rho0),
        saturated=saturated,
        vtilde=_frozen(vtilde),
        start_velocities=_frozen(start),
        max_drift=fmax,
        min_drift=fmin,
        velocity_bound=float(max(cap, float(np.max(vtilde)) if n else 0.0)),
        particle_bounds=_frozen(np.maximum(vtilde, cap)),
        s=s,
        S=S,
        leader_speed_max=vmax,
        gap_min=1.0 / (n * th.rho_bar),
    )


def well_prepared_velocities(positions, theta, drift, gamma, t0=0.0):
    """Velocities on the first-order manifold ``theta(rho) F(t0, x) / gamma``."""
    x = np.asarray(positions, dtype=float)
    n = x.size - 1
    rho = density_of_gap(np.diff(x), n)
    return np.asarray(theta(rho)) * np.asarray(drift(t0, x[:-1])) / gamma
