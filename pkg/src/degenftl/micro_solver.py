"""Backward-cascade solver for the regularized follow-the-leader system.

Each follower obeys ``eps (zeta(rho_i) + delta) x_i'' + gamma x_i' =
theta(rho_i) F(t, x_i)`` with ``rho_i = 1 / (N (x_{i+1} - x_i))``. Since
``x_i`` depends only on ``x_{i+1}``, the particles are integrated one at a
time from the leader backwards, each against a C^1 Hermite interpolant of the
previous particle's dense output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import integrate
from scipy.interpolate import CubicHermiteSpline

from . import _kernels as K
from .errors import (
    ConfigError,
    OrderingViolation,
    QuadratureFailure,
    StepUnderflow,
    ToleranceNotMet,
)
from .model import ValidatedConfig, validate_config

DEFAULT_RTOL = 1e-9
DEFAULT_ATOL = 1e-12
DEFAULT_GRID = 1001
ZETA_SMALL = 1e-2


@dataclass(frozen=True, eq=False)
class TrajectorySet:
    """Positions and velocities of all ``N+1`` particles on an output grid."""

    times: np.ndarray
    positions: np.ndarray
    velocities: np.ndarray
    config: ValidatedConfig
    rtol: float = DEFAULT_RTOL
    atol: float = DEFAULT_ATOL
    stats: dict = field(default_factory=dict)
    interval_integrals: Optional["IntervalIntegrals"] = None

    @property
    def n(self):
        return self.positions.shape[0] - 1

    @property
    def gaps(self):
        return np.diff(self.positions, axis=0)

    @property
    def densities(self):
        return 1.0 / (self.n * self.gaps)

    def accelerations(self):
        """Second derivatives of the followers recovered from the equation."""
        vc = self.config
        x, v = self.positions[:-1], self.velocities[:-1]
        rho = self.densities
        th = vc.theta(rho)
        ze = vc.zeta(rho)
        f = vc.drift(self.times[None, :], x)
        return (th * f - vc.gamma * v) / (vc.epsilon * (ze + vc.delta))


@dataclass(frozen=True, eq=False)
class IntervalIntegrals:
    """Per-cell time integrals over each output interval, taken on the solver steps.

    ``first[q, i, k]`` is ``int g`` and ``second[q, i, k]`` is ``int g s`` over
    ``[t_k, t_{k+1}]`` with ``s = (t - t_k) / (t_{k+1} - t_k)``, for the cell
    quantity ``g`` named ``QUANTITIES[q]`` of cell ``i``: the velocity ``v_i``,
    its square, ``v_i v_{i+1}``, ``v_i / theta_i``, the regularization defect
    ``eps x_i'' (zeta_i + delta - theta_i) / theta_i`` and ``v_{i+1}``. Pairing them with the
    endpoint values of a slowly varying weight ``c`` gives
    ``int c g ~ c_k (first - second) + c_{k+1} second`` without sampling ``g``.

    The ``*_shift`` quantities are ``g (x_i(t) - x_i(t_k))`` and
    ``*_shift_ahead`` use ``x_{i+1}``; only ``first`` is meaningful for them.
    They let a weight that depends on the cell edges be corrected to first
    order in the edge displacement where ``g`` carries a braking impulse.
    """

    QUANTITIES = ("v", "v2", "v_v_ahead", "mobility", "defect", "v_ahead",
                  "mobility_shift", "mobility_shift_ahead", "defect_shift", "defect_shift_ahead")

    first: np.ndarray
    second: np.ndarray

    def index(self, name):
        return self.QUANTITIES.index(name)

    def get(self, name):
        q = self.index(name)
        return self.first[q], self.second[q]


@dataclass
class StepperState:
    """State of the particle currently being advanced.

    ``ahead_*`` hold the Hermite nodes of the particle in front; ``pointer``
    is the current segment index into them.
    """

    t: float
    y: float
    v: float
    h: float
    ahead_t: np.ndarray
    ahead_x: np.ndarray
    ahead_v: np.ndarray
    pointer: int = 0
    rejected: int = 0

    def __post_init__(self):
        if not self.h > 0:
            raise ValueError("step size must be positive")


def exponential_update(v, beta, forcing, h, y=0.0, forcing_end=None, beta_end=None):
    """Integrating-factor update of ``beta v' + v = forcing`` over a step ``h``.

    ``beta`` is the relaxation time ``eps (zeta + delta) / gamma``. With
    ``forcing_end``/``beta_end`` the forcing is taken linear in time and the
    rate averaged. Returns ``(y1, v1)``.
    """
    if h < 0:
        raise ValueError("h must be >= 0")
    if h == 0:
        return float(y), float(v)
    f1 = forcing if forcing_end is None else forcing_end
    b1 = beta if beta_end is None else beta_end
    y1, v1, _ = K.exp_update(float(y), float(v), float(h), float(forcing), float(f1),
                             1.0 / beta, 1.0 / b1)
    return y1, v1


def _packs(vc):
    return vc.theta.pack(), vc.zeta.pack(), vc.drift.pack()


def step_particle(state: StepperState, config, t_stop, rtol=DEFAULT_RTOL, atol=DEFAULT_ATOL,
                  zeta_small=ZETA_SMALL):
    """Advance ``state`` by one accepted adaptive step, never past ``t_stop``."""
    vc = validate_config(config)
    th, ze, dr = _packs(vc)
    at = np.ascontiguousarray(state.ahead_t, dtype=float)
    ax = np.ascontiguousarray(state.ahead_x, dtype=float)
    av = np.ascontiguousarray(state.ahead_v, dtype=float)
    j = K.locate(at, at.size, state.pointer, state.t)
    xa = K.hermite_eval(at, ax, av, j, state.t)
    T = vc.horizon
    status, t1, y1, v1, h1, j1, xa1, rej, *_ = K.particle_step(
        state.t, state.y, state.v, state.h, float(t_stop), xa, at, ax, av, at.size, j,
        vc.n_particles, vc.epsilon, vc.gamma, vc.delta, th, ze, dr,
        rtol, atol, vc.velocity_bound, zeta_small, vc.gap_min - 10 * atol, 1e-14 * T)
    if status == K.UNDERFLOW:
        raise StepUnderflow(f"step size fell below {1e-14 * T:g} at t={t1!r}")
    if status == K.ORDERING:
        raise OrderingViolation(f"gap fell below the collision guard at t={t1!r}")
    return StepperState(t1, y1, v1, h1, at, ax, av, j1, state.rejected + rej)


def _check_grid(grid, T):
    g = np.asarray(grid, dtype=float)
    if g.ndim != 1 or g.size < 2:
        raise ConfigError(["output grid needs at least two times"])
    if g[0] != 0.0:
        raise ConfigError(["output grid must start at t = 0"])
    if np.any(np.diff(g) <= 0):
        raise ConfigError(["output grid must be strictly increasing"])
    if g[-1] > T * (1 + 1e-12):
        raise ConfigError([f"output grid ends at {g[-1]!r} beyond the horizon {T!r}"])
    return np.ascontiguousarray(np.minimum(g, T))


def solve_system(config, output_grid=None, rtol=DEFAULT_RTOL, atol=DEFAULT_ATOL,
                 zeta_small=ZETA_SMALL, max_steps=5_000_000, interval_integrals=True):
    """Integrate all followers from ``N-1`` down to ``0``.

    ``output_grid`` defaults to ``DEFAULT_GRID`` equispaced times on ``[0, T]``.
    With ``interval_integrals`` the result also carries the per-interval cell
    integrals used by the weak-form engine (see :class:`IntervalIntegrals`).
    Raises OrderingViolation, StepUnderflow or ToleranceNotMet on failure.
    """
    vc = validate_config(config)
    T = float(vc.horizon)
    if output_grid is None:
        output_grid = np.linspace(0.0, T, DEFAULT_GRID)
    elif np.ndim(output_grid) == 0:
        output_grid = np.linspace(0.0, T, int(output_grid))
    grid = _check_grid(output_grid, T)
    n = vc.n_particles
    lt, lx, lv = vc.leader.nodes(T)
    th, ze, dr = _packs(vc)
    h0 = min(grid[1] - grid[0], 1e-3 * T)
    X, V, G0, G1, status, bad_i, bad_t, steps, rejects = K.solve_cascade(
        n, float(vc.epsilon), float(vc.gamma), float(vc.delta),
        np.ascontiguousarray(vc.initial_positions), np.ascontiguousarray(vc.start_velocities),
        th, ze, dr, np.ascontiguousarray(lt), np.ascontiguousarray(lx), np.ascontiguousarray(lv),
        grid, float(rtol), float(atol), float(vc.velocity_bound), float(zeta_small),
        float(vc.gap_min - 10 * atol), float(h0), float(1e-14 * T), int(max_steps),
        bool(interval_integrals))
    if status == K.ORDERING:
        raise OrderingViolation(f"particle {bad_i} reached the collision guard at t={bad_t!r}",
                                index=int(bad_i), time=float(bad_t))
    if status == K.UNDERFLOW:
        raise StepUnderflow(f"step size underflow for particle {bad_i} at t={bad_t!r}",
                            index=int(bad_i), time=float(bad_t))
    if status == K.MAX_STEPS:
        raise ToleranceNotMet(f"particle {bad_i} exceeded {max_steps} steps at t={bad_t!r}",
                              index=int(bad_i), time=float(bad_t))
    X.setflags(write=False)
    V.setflags(write=False)
    stats = {
        "steps": int(steps.sum()),
        "rejected": int(rejects.sum()),
        "max_steps_per_particle": int(steps.max()) if n else 0,
        "numba": K.USE_NUMBA,
    }
    integrals = None
    if interval_integrals:
        G0.setflags(write=False)
        G1.setflags(write=False)
        integrals = IntervalIntegrals(G0, G1)
    traj = TrajectorySet(grid, X, V, vc, float(rtol), float(atol), stats, integrals)
    stats["regime_switches"] = regime_switches(traj)
    return traj


def regime_switches(traj):
    """Number of sampled crossings of the alertness threshold, over all particles."""
    vc = traj.config
    if vc.zeta.rho_bar >= vc.theta.rho_bar:
        return 0
    above = traj.densities >= vc.zeta.rho_bar
    return int(np.count_nonzero(above[:, 1:] != above[:, :-1]))


def check_invariants(traj, slack=None):
    """Evaluate the named trajectory invariants.

    Returns ``{name: {"passed": bool, "value": float}}``.
    """
    vc = traj.config
    if slack is None:
        slack = 10 * traj.atol
    gaps = traj.gaps
    rho = traj.densities
    v = traj.velocities[:-1]
    min_gap = float(np.min(gaps))
    out = {}
    out["ordering"] = {"passed": bool(min_gap >= vc.gap_min - slack and min_gap > 0),
                       "value": min_gap}
    dx = np.diff(traj.positions, axis=1)
    out["monotone_positions"] = {"passed": bool(np.all(dx >= -slack)), "value": float(np.min(dx))}
    bound = vc.particle_bounds[:, None] + 1e-8
    over = float(np.max(v - bound))
    out["velocity_box"] = {"passed": bool(np.min(v) >= -1e-12 and over <= 0),
                           "value": float(np.max(v / bound) if v.size else 0.0)}
    rho_pos = float(np.max(rho[:, 1:])) if rho.shape[1] > 1 else 0.0
    out["no_congestion"] = {"passed": bool(rho_pos < vc.theta.rho_bar and
                                           float(np.max(rho)) <= vc.theta.rho_bar * (1 + 1e-12)),
                            "value": rho_pos}
    return out


# ----------------------------------------------------------------- oracles

_GL_CACHE = {}


def gauss_legendre(n):
    if n not in _GL_CACHE:
        _GL_CACHE[n] = np.polynomial.legendre.leggauss(n)
    return _GL_CACHE[n]


def _particle_splines(traj, i):
    t = traj.times
    xi = CubicHermiteSpline(t, traj.positions[i], traj.velocities[i])
    xa = CubicHermiteSpline(t, traj.positions[i + 1], traj.velocities[i + 1])
    return xi, xa


def _oracle_pass(traj, i, s, t, order, splines):
    vc = traj.config
    xi, xa = splines
    g = traj.times
    nodes = np.concatenate([[s], g[(g > s) & (g < t)], [t]])
    xg, wg = gauss_legendre(order)
    a_, b_ = nodes[:-1], nodes[1:]
    half = 0.5 * (b_ - a_)
    mid = 0.5 * (b_ + a_)

    def rate_and_forcing(tau):
        y = xi(tau)
        rho = 1.0 / (vc.n_particles * (xa(tau) - y))
        r = vc.gamma / (vc.epsilon * (vc.zeta(rho) + vc.delta))
        a = vc.theta(rho) * vc.drift(tau, y) / vc.gamma
        return r, a

    # cumulative integral of the rate at panel starts
    tau = mid[:, None] + half[:, None] * xg[None, :]
    r, _ = rate_and_forcing(tau)
    panel = half * (r @ wg)
    start = np.concatenate([[0.0], np.cumsum(panel)])
    total = start[-1]
    # rate integral from panel start to each outer node
    sub_half = 0.5 * (tau - a_[:, None])
    sub_mid = 0.5 * (tau + a_[:, None])
    inner_t = sub_mid[:, :, None] + sub_half[:, :, None] * xg[None, None, :]
    ri, _ = rate_and_forcing(inner_t)
    partial = start[:-1, None] + sub_half * (ri @ wg)
    ro, ao = rate_and_forcing(tau)
    kernel = ro * ao * np.exp(-(total - partial))
    forced = float(np.sum(half * (kernel @ wg)))
    return traj_velocity_at(traj, i, s) * math.exp(-total) + forced


def traj_velocity_at(traj, i, s):
    k = np.searchsorted(traj.times, s)
    if k < traj.times.size and traj.times[k] == s:
        return float(traj.velocities[i, k])
    return float(CubicHermiteSpline(traj.times, traj.velocities[i],
                                    np.gradient(traj.velocities[i], traj.times))(s))


def velocity_oracle(traj, i, s, t, tol=1e-11, max_order=64):
    """Velocity of particle ``i`` at ``t`` from the integrating-factor formula.

    The rate ``gamma / (eps (zeta + delta))`` and forcing ``theta F / gamma``
    are rebuilt from the trajectory samples (cubic Hermite in time) and the
    nested integrals are evaluated by composite Gauss-Legendre on the output
    panels, doubling the order until two passes agree to ``tol``.
    """
    if not 0 <= i < traj.n:
        raise IndexError(f"particle index {i} out of range for N={traj.n}")
    if not (traj.times[0] <= s <= t <= traj.times[-1]):
        raise ValueError("need times[0] <= s <= t <= times[-1]")
    if s == t:
        return traj_velocity_at(traj, i, s)
    splines = _particle_splines(traj, i)
    order = 8
    prev = _oracle_pass(traj, i, s, t, order, splines)
    while order < max_order:
        order *= 2
        cur = _oracle_pass(traj, i, s, t, order, splines)
        if abs(cur - prev) <= tol * max(1.0, abs(cur)):
            return cur
        prev = cur
    raise QuadratureFailure(f"velocity oracle did not settle by order {max_order}")


@dataclass(frozen=True)
class ProbeReport:
    event: bool
    message: str
    index: int
    t_star: Optional[float] = None
    times: tuple = ()
    velocities: tuple = ()
    equilibrium: tuple = ()
    gaps: tuple = ()


def boundary_velocity_probe(traj, i, levels=6):
    """Compare ``x_i'`` with ``theta F / gamma`` on times approaching the first
    sampled instant at which ``rho_i`` reaches the alertness threshold.

    For an index saturated at ``t = 0`` the same comparison is made by linear
    extrapolation of the velocity to ``0+``.
    """
    vc = traj.config
    rho = traj.densities[i]
    t = traj.times
    x = traj.positions[i]
    v = traj.velocities[i]

    def equilibrium(k):
        return float(vc.theta(rho[k]) * vc.drift(t[k], x[k]) / vc.gamma)

    if i in vc.saturated:
        # extrapolate the velocity to 0+ from the first samples away from the start layer
        ks = [2 ** j for j in range(levels) if 2 ** j < t.size]
        vel = []
        for k in ks:
            kk = min(2 * k, t.size - 1)
            vel.append(v[k] - (v[kk] - v[k]) * t[k] / (t[kk] - t[k]))
        eq0 = equilibrium(0)
        return ProbeReport(True, "saturated at t=0", i, 0.0, tuple(float(t[k]) for k in ks),
                           tuple(float(a) for a in vel), tuple(eq0 for _ in ks),
                           tuple(abs(float(a) - eq0) for a in vel))
    hit = np.nonzero(rho >= vc.zeta.rho_bar * (1 - 1e-12))[0]
    if hit.size == 0:
        return ProbeReport(False, "no saturation event", i)
    kstar = int(hit[0])
    ks = sorted({max(kstar - 2 ** j, 0) for j in range(levels)} | {kstar}, reverse=False)
    eqs = [equilibrium(k) for k in ks]
    return ProbeReport(True, "alertness threshold reached", i, float(t[kstar]),
                       tuple(float(t[k]) for k in ks), tuple(float(v[k]) for k in ks),
                       tuple(eqs), tuple(abs(float(v[k]) - e) for k, e in zip(ks, eqs)))


@dataclass(frozen=True)
class DiracKernelTable:
    ns: tuple
    values: tuple
    errors: tuple

    def rows(self):
        return list(zip(self.ns, self.values, self.errors))


def dirac_kernel_check(f: Callable, g: Callable, t, ns: Sequence, a=0.0, tol=1e-12):
    """Tabulate ``int_a^t f_n/g_n exp(-int_tau^t 1/g_n) dtau`` for each ``n``.

    ``f(n, tau)`` and ``g(n, tau)`` are scalar callables; ``g`` must be positive.
    """
    vals = []
    errs = []
    for n in ns:
        if t <= a:
            vals.append(0.0)
            errs.append(0.0)
            continue

        def inner(tau, n=n):
            val, err = integrate.quad(lambda r: 1.0 / g(n, r), tau, t,
                                      epsabs=tol, epsrel=tol, limit=200)
            return val

        def outer(tau, n=n):
            return f(n, tau) / g(n, tau) * math.exp(-inner(tau))

        width = g(n, t)
        pts = sorted({t - c * width for c in (1.0, 4.0, 16.0, 64.0) if a < t - c * width < t})
        val, err = integrate.quad(outer, a, t, points=pts or None, epsabs=tol,
                                  epsrel=tol, limit=500)
        if not math.isfinite(val) or err > 1e3 * tol * max(1.0, abs(val)):
            raise QuadratureFailure(f"kernel quadrature error {err:g} for n={n}")
        vals.append(float(val))
        errs.append(float(err))
    return DiracKernelTable(tuple(ns), tuple(vals), tuple(errs))
