"""Many-particle and vanishing-inertia sweeps, plus the first-order reference.

A :class:`SweepPlan` fixes one macroscopic initial density, one drift, one
congestion profile (used for both nonlinearities) and a leader; each ``N`` of
the sweep places its particles at the quantiles of that density. Weak-*
convergence is measured through pairings with the test-function catalog.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
from scipy.integrate import solve_ivp

from . import _kernels as K
from .errors import ConfigError, ConfigMismatch, OrderingViolation, ToleranceNotMet
from .micro_solver import DEFAULT_ATOL, DEFAULT_GRID, DEFAULT_RTOL, TrajectorySet, check_invariants, solve_system
from .model import (
    DriftField,
    LeaderTrajectory,
    NonlinearityProfile,
    ParticleSystemConfig,
    Profile1D,
    THRESHOLD_RTOL,
    validate_config,
    well_prepared_velocities,
)
from .testfunctions import select
from .weak_residuals import WeakFormEngine, decay_study, fit_loglog

MODES = ("many_particle", "vanishing_inertia")


# ------------------------------------------------------------ initial density

@dataclass(frozen=True, eq=False)
class DensityProfile:
    """Piecewise-linear density on ``[breakpoints[0], breakpoints[-1]]``,
    zero outside and rescaled to unit mass."""

    breakpoints: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        bp = np.array(self.breakpoints, dtype=float)
        vals = np.array(self.values, dtype=float)
        errs = []
        if bp.ndim != 1 or bp.size < 2 or vals.shape != bp.shape:
            raise ConfigError(["density needs matching breakpoints and values, at least two each"])
        if np.any(np.diff(bp) <= 0):
            errs.append("density breakpoints must be strictly increasing")
        if np.any(~np.isfinite(vals)) or np.any(vals < 0):
            errs.append("density values must be finite and >= 0")
        elif np.any((vals[:-1] == 0) & (vals[1:] == 0)):
            errs.append("density must not vanish on a whole segment")
        if errs:
            raise ConfigError(errs)
        m = float(np.sum(0.5 * (vals[1:] + vals[:-1]) * np.diff(bp)))
        vals = vals / m
        bp.setflags(write=False)
        vals.setflags(write=False)
        object.__setattr__(self, "breakpoints", bp)
        object.__setattr__(self, "values", vals)

    @classmethod
    def uniform(cls, lo, hi):
        return cls([lo, hi], [1.0, 1.0])

    @property
    def support(self):
        return float(self.breakpoints[0]), float(self.breakpoints[-1])

    @property
    def sup(self):
        return float(np.max(self.values))

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        inside = (x >= self.breakpoints[0]) & (x <= self.breakpoints[-1])
        return np.where(inside, np.interp(x, self.breakpoints, self.values), 0.0)

    def _segment_mass(self):
        return 0.5 * (self.values[1:] + self.values[:-1]) * np.diff(self.breakpoints)

    def quantiles(self, levels):
        """Inverse of the cumulative distribution at ``levels`` in ``[0, 1]``."""
        levels = np.clip(np.asarray(levels, dtype=float), 0.0, 1.0)
        bp, vals = self.breakpoints, self.values
        cum = np.concatenate([[0.0], np.cumsum(self._segment_mass())])
        cum /= cum[-1]
        j = np.clip(np.searchsorted(cum, levels, side="right") - 1, 0, bp.size - 2)
        c = levels - cum[j]
        p = vals[j]
        w = bp[j + 1] - bp[j]
        k = (vals[j + 1] - p) / w
        # root of p s + k s^2 / 2 = c, written to avoid cancellation
        disc = np.sqrt(np.maximum(p * p + 2.0 * k * c, 0.0))
        denom = p + disc
        s = np.where(c > 0, 2.0 * c / np.where(denom > 0, denom, 1.0), 0.0)
        return np.minimum(bp[j] + s, bp[j + 1])

    def placement(self, n):
        """``N+1`` positions carrying mass ``1/N`` per cell; the end points are
        the support edges exactly."""
        x = self.quantiles(np.arange(n + 1) / n)
        x[0], x[-1] = self.breakpoints[0], self.breakpoints[-1]
        return x


# ---------------------------------------------------------------------- plan

@dataclass(frozen=True)
class EpsilonRule:
    """``Fixed``: ``eps = value``. ``Vanishing``: ``eps_N = value / N**power``."""

    kind: str = "fixed"
    value: float = 1.0
    power: float = 1.0

    def __post_init__(self):
        if self.kind not in ("fixed", "vanishing"):
            raise ConfigError([f"epsilon rule must be 'fixed' or 'vanishing', got {self.kind!r}"])
        if not (math.isfinite(self.value) and self.value > 0):
            raise ConfigError([f"epsilon value must be > 0, got {self.value!r}"])
        if self.kind == "vanishing" and not self.power > 0:
            raise ConfigError([f"vanishing epsilon needs power > 0, got {self.power!r}"])

    @classmethod
    def fixed(cls, value):
        return cls("fixed", float(value))

    @classmethod
    def vanishing(cls, scale=1.0, power=1.0):
        return cls("vanishing", float(scale), float(power))

    def __call__(self, n):
        return self.value if self.kind == "fixed" else self.value / float(n) ** self.power


@dataclass(frozen=True, eq=False)
class SweepPlan:
    ns: tuple
    epsilon: EpsilonRule
    density: DensityProfile
    theta: NonlinearityProfile
    drift: DriftField
    leader_speed: float = 1.0
    leader: Optional[LeaderTrajectory] = None  # overrides leader_speed when given
    gamma: float = 1.0
    horizon: float = 1.0
    velocities: Union[str, Profile1D] = "well_prepared"
    grid: int = DEFAULT_GRID
    rtol: float = DEFAULT_RTOL
    atol: float = DEFAULT_ATOL
    delta: Optional[float] = None
    phi: str = "all"

    def leader_trajectory(self):
        if self.leader is not None:
            return self.leader
        return LeaderTrajectory.constant_speed(self.density.support[1], self.leader_speed)

    def epsilon_for(self, n):
        return self.epsilon(n)

    def replace(self, **changes):
        kw = {f: getattr(self, f) for f in self.__dataclass_fields__}
        kw.update(changes)
        return SweepPlan(**kw)


def build_config(plan: SweepPlan, n):
    """Particle system for one ``N`` of the plan."""
    x = plan.density.placement(n)
    th = plan.theta
    if isinstance(plan.velocities, str):
        if plan.velocities != "well_prepared":
            raise ConfigError([f"unknown velocity rule {plan.velocities!r}"])
        v = well_prepared_velocities(x, th, plan.drift, plan.gamma)
    else:
        v = np.asarray(plan.velocities(x[:-1]), dtype=float)
    zeta = NonlinearityProfile(th.kind, th.alpha, th.rho_bar, th.breakpoints, th.values, "alertness")
    return ParticleSystemConfig(
        n_particles=int(n), epsilon=float(plan.epsilon_for(n)), gamma=float(plan.gamma),
        horizon=float(plan.horizon), initial_positions=x, initial_velocities=v,
        theta=th, zeta=zeta, drift=plan.drift, leader=plan.leader_trajectory(), delta=plan.delta)


def validate_plan(plan: SweepPlan):
    """Check the plan and return the family constants ``{s, S, velocity_bound}``.

    Every ``N`` must give a valid config and share the same support bounds and
    velocity bound.
    """
    errs = []
    ns = list(plan.ns)
    if len(ns) < 2:
        errs.append("a sweep needs at least two values of N")
    if any(not isinstance(n, (int, np.integer)) or n < 1 for n in ns):
        errs.append("N values must be integers >= 1")
    elif any(b <= a for a, b in zip(ns, ns[1:])):
        errs.append("N values must be strictly increasing")
    elif len(ns) >= 2:
        ratios = [b / a for a, b in zip(ns, ns[1:])]
        if max(ratios) - min(ratios) > 1e-12 * max(ratios):
            errs.append(f"N values must form a geometric sequence, got ratios {ratios}")
    if plan.density.sup > plan.theta.rho_bar * (1 + THRESHOLD_RTOL):
        errs.append(f"initial density sup {plan.density.sup!r} exceeds the congestion "
                    f"threshold {plan.theta.rho_bar!r}")
    if not (isinstance(plan.grid, (int, np.integer)) and plan.grid >= 3):
        errs.append(f"grid must be an integer >= 3, got {plan.grid!r}")
    if errs:
        raise ConfigError(errs)
    consts = None
    for n in ns:
        try:
            vc = validate_config(build_config(plan, n))
        except ConfigError as exc:
            raise ConfigError([f"N={n}: {e}" for e in exc.errors]) from None
        c = (vc.s, vc.S, vc.velocity_bound)
        if consts is None:
            consts = c
        elif not np.allclose(c, consts, rtol=1e-9, atol=1e-12):
            raise ConfigError([f"N={n}: family constants (s, S, V) = {c} differ from {consts}"])
    return {"s": consts[0], "S": consts[1], "velocity_bound": consts[2]}


# ------------------------------------------------------------ sweep entries

@dataclass(frozen=True, eq=False)
class SweepEntry:
    """Everything retained from the run at one ``N``."""

    n: int
    eps: float
    times: np.ndarray
    x_first: np.ndarray
    x_last: np.ndarray
    pairings: dict
    reports: list
    eps_block_bound: dict
    invariants: dict
    constants: dict
    stats: dict


def eps_block_constant(phi, horizon, lo, hi, velocity_bound):
    """Bound on ``|<e1, phi_t> + <e2, phi_x> + initial and terminal terms|``,
    from ``int |e1| dx <= V`` and ``int |e2| dx <= V^2``."""
    nm = phi.sup_norms(horizon, lo, hi)
    V = velocity_bound
    return horizon * (V * nm["phi_t"] + V * V * nm["phi_x"]) + 2.0 * V * nm["phi"]


def _run_entry(plan: SweepPlan, n: int):
    cfg = build_config(plan, n)
    traj = solve_system(cfg, plan.grid, rtol=plan.rtol, atol=plan.atol)
    inv = check_invariants(traj)
    eng = WeakFormEngine(traj)
    functions = select(eng.default_catalog(), plan.phi)
    vc = traj.config
    pairings, reports, bounds = {}, [], {}
    for phi in functions:
        pairings[phi.id] = eng.pairings(phi)
        reports.append(eng.report(phi))
        bounds[phi.id] = eps_block_constant(phi, vc.horizon, vc.s, vc.S, vc.velocity_bound)
    return SweepEntry(
        n=int(n), eps=float(vc.epsilon), times=np.asarray(traj.times),
        x_first=np.array(traj.positions[0]), x_last=np.array(traj.positions[-1]),
        pairings=pairings, reports=reports, eps_block_bound=bounds,
        invariants={k: bool(v["passed"]) for k, v in inv.items()},
        constants={"s": vc.s, "S": vc.S, "velocity_bound": vc.velocity_bound,
                   "C_R": eng.C_R, "L_F": vc.drift.lipschitz_x, "gamma": float(vc.gamma)},
        stats=dict(traj.stats))


def _run_entries(plan, workers):
    ns = [int(n) for n in plan.ns]
    if workers and workers > 1 and len(ns) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(ns))) as pool:
            futures = {n: pool.submit(_run_entry, plan, n) for n in ns}
            entries = {n: f.result() for n, f in futures.items()}
    else:
        entries = {n: _run_entry(plan, n) for n in ns}
    return [entries[n] for n in sorted(entries)]


# ------------------------------------------------------------------- report

@dataclass(frozen=True)
class SweepRow:
    N: int
    eps: float
    phi_id: str
    pairing_rho: float
    pairing_e1: float
    pairing_e2: float
    pairing_lambda: float
    g_gap: Optional[float]
    cauchy_diff: Optional[float]
    eps_block: float
    eps_block_bound: float


def first_monotone_index(diffs):
    """Smallest index from which ``diffs`` is nonincreasing."""
    k = len(diffs) - 1
    while k > 0 and diffs[k] <= diffs[k - 1]:
        k -= 1
    return max(k, 0)


@dataclass(frozen=True, eq=False)
class ConvergenceReport:
    mode: str
    entries: list
    rows: list
    constants: dict
    residual_fits: list
    gap_fits: list
    n_star: dict
    x_first_cauchy: list
    x_last_cauchy: list

    @property
    def ns(self):
        return [e.n for e in self.entries]

    @property
    def phi_ids(self):
        seen = []
        for r in self.rows:
            if r.phi_id not in seen:
                seen.append(r.phi_id)
        return seen

    def series(self, phi_id, name):
        return [getattr(r, name) for r in self.rows if r.phi_id == phi_id]

    def reports(self):
        return [r for e in self.entries for r in e.reports]

    def summary(self):
        lines = [f"mode: {self.mode}",
                 "N: " + " ".join(str(n) for n in self.ns),
                 "eps: " + " ".join(f"{e.eps:.6g}" for e in self.entries)]
        lines.append("fitted log-log slopes of the weak-form remainders (empirical):")
        for f in self.residual_fits:
            s = "identically zero" if f.vanishing else f"{f.slope:.3f}"
            lines.append(f"  {f.phi_id:12s} {f.quantity:9s} {s}")
        if self.gap_fits:
            lines.append("fitted log-log slopes of the mobility gap g(N) (empirical):")
            for f in self.gap_fits:
                s = "identically zero" if f.vanishing else f"{f.slope:.3f}"
                lines.append(f"  {f.phi_id:12s} {s}")
        lines.append("Cauchy differences of the density pairing nonincreasing from N*:")
        for pid, n in self.n_star.items():
            lines.append(f"  {pid:12s} N* = {n}")
        lines.append("sup-norm Cauchy differences of the last follower x_0: "
                     + " ".join(f"{d:.3e}" for d in self.x_first_cauchy))
        return "\n".join(lines) + "\n"


def _assemble(mode, entries, constants):
    vanishing = mode == "vanishing_inertia"
    rows = []
    prev = {}
    for e in entries:
        for rep in e.reports:
            p = e.pairings[rep.phi_id]
            g = abs(p.mobility - p.rho_drift / e.constants["gamma"]) if vanishing else None
            cd = abs(p.rho - prev[rep.phi_id]) if rep.phi_id in prev else None
            prev[rep.phi_id] = p.rho
            rows.append(SweepRow(e.n, e.eps, rep.phi_id, p.rho, p.e1, p.e2, p.mobility, g, cd,
                                 e.eps * abs(p.eps_bracket), e.eps_block_bound[rep.phi_id]))
    reports = [r for e in entries for r in e.reports]
    residual_fits = decay_study(reports)
    gap_fits = []
    n_star = {}
    ns = [e.n for e in entries]
    phi_ids = [r.phi_id for r in entries[0].reports]
    for pid in phi_ids:
        sel = [r for r in rows if r.phi_id == pid]
        diffs = [r.cauchy_diff for r in sel[1:]]
        n_star[pid] = ns[1 + first_monotone_index(diffs)] if diffs else ns[0]
        if vanishing:
            gap_fits.append(fit_loglog(ns, [r.g_gap for r in sel], pid, "g_gap"))
    xf = [float(np.max(np.abs(b.x_first - a.x_first))) for a, b in zip(entries, entries[1:])]
    xl = [float(np.max(np.abs(b.x_last - a.x_last))) for a, b in zip(entries, entries[1:])]
    return ConvergenceReport(mode, entries, rows, constants, residual_fits, gap_fits, n_star, xf, xl)


def run_sweep(plan: SweepPlan, mode, workers=1):
    if mode not in MODES:
        raise ConfigError([f"mode must be one of {MODES}, got {mode!r}"])
    want = "fixed" if mode == "many_particle" else "vanishing"
    if plan.epsilon.kind != want:
        raise ConfigError([f"{mode} sweeps need a {want} epsilon rule, plan has {plan.epsilon.kind!r}"])
    constants = validate_plan(plan)
    entries = _run_entries(plan, workers)
    return _assemble(mode, entries, constants)


def run_many_particle(plan: SweepPlan, workers=1):
    """Sweep over N at fixed epsilon."""
    return run_sweep(plan, "many_particle", workers)


def run_vanishing_inertia(plan: SweepPlan, workers=1):
    """Sweep over N with ``eps_N -> 0``; rows also carry the mobility gap ``g``."""
    return run_sweep(plan, "vanishing_inertia", workers)


# ------------------------------------------------------- first-order model

def first_order_reference(config, output_grid=None, rtol=1e-11, atol=1e-13):
    """Solve ``gamma x_i' = theta(rho_i) F(t, x_i)`` for all followers at once.

    ``epsilon``, ``delta`` and the initial velocities of ``config`` are
    ignored. Velocities in the result are the right-hand side at each output
    time (the leader row carries the leader velocity).
    """
    n = int(config.n_particles)
    eps = config.epsilon if (isinstance(config.epsilon, (int, float)) and config.epsilon > 0) else 1.0
    vc = validate_config(config.replace(epsilon=float(eps), initial_velocities=np.zeros(n)))
    T = float(vc.horizon)
    if output_grid is None:
        output_grid = DEFAULT_GRID
    grid = np.linspace(0.0, T, int(output_grid)) if np.ndim(output_grid) == 0 else np.asarray(output_grid, float)
    th, dr = vc.theta.pack(), vc.drift.pack()
    lead = vc.leader
    gamma = float(vc.gamma)
    buf = np.empty(n)

    def rhs(t, x):
        return K.first_order_rhs(n, gamma, th, dr, float(t), x, float(lead.position(t)), buf).copy()

    x0 = np.array(vc.initial_positions[:-1], dtype=float)
    sol = solve_ivp(rhs, (0.0, T), x0, method="DOP853", t_eval=grid, rtol=rtol, atol=atol)
    if not sol.success:
        raise ToleranceNotMet(f"first-order reference failed: {sol.message}")
    X = np.vstack([sol.y, lead.position(grid)[None, :]])
    V = np.empty_like(X)
    for k, t in enumerate(grid):
        V[:-1, k] = rhs(t, np.ascontiguousarray(X[:-1, k]))
    V[-1] = lead.velocity(grid)
    gaps = np.diff(X, axis=0)
    if np.any(gaps < vc.gap_min * (1 - 1e-9)):
        i, k = np.argwhere(gaps < vc.gap_min * (1 - 1e-9))[0]
        raise OrderingViolation(f"first-order particle {i} below the minimal gap at t={grid[k]!r}",
                                index=int(i), time=float(grid[k]))
    X.setflags(write=False)
    V.setflags(write=False)
    stats = {"model": "first_order", "nfev": int(sol.nfev), "method": "DOP853"}
    return TrajectorySet(grid, X, V, vc, float(rtol), float(atol), stats)


@dataclass(frozen=True)
class InertiaGap:
    epsilon: float
    sup_gap: float
    pairing_gaps: dict = field(default_factory=dict)


def _same_model(a, b):
    def packs(vc):
        return (vc.theta.pack(), vc.drift.pack())

    def flat(p):
        out = []
        for item in p:
            if isinstance(item, tuple):
                out.extend(flat(item))
            else:
                out.append(np.atleast_1d(np.asarray(item, dtype=float)))
        return out

    fa, fb = flat(packs(a)), flat(packs(b))
    return len(fa) == len(fb) and all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(fa, fb))


def inertia_gap(second: TrajectorySet, first: TrajectorySet, functions=None):
    """Sup-norm distance between second- and first-order trajectories plus the
    difference of the density and momentum pairings per test function.

    ``functions`` defaults to the catalog; pass ``()`` to skip the pairings.
    """
    if second.stats.get("model") == "first_order":
        raise ConfigMismatch("the first argument must be a second-order (eps > 0) trajectory; "
                             "use first_order_reference for eps = 0")
    a, b = second.config, first.config
    problems = []
    if second.n != first.n:
        problems.append(f"N differs: {second.n} vs {first.n}")
    elif not np.array_equal(second.times, first.times):
        problems.append("output grids differ")
    else:
        if not np.array_equal(a.initial_positions, b.initial_positions):
            problems.append("initial positions differ")
        for name in ("gamma", "horizon"):
            if getattr(a, name) != getattr(b, name):
                problems.append(f"{name} differs")
        if not _same_model(a, b):
            problems.append("congestion profile or drift differ")
        lt = np.linspace(0.0, float(a.horizon), 17)
        if not np.allclose(a.leader.position(lt), b.leader.position(lt), rtol=0, atol=1e-14):
            problems.append("leader trajectories differ")
    if problems:
        raise ConfigMismatch("; ".join(problems))
    sup = float(np.max(np.abs(second.positions - first.positions)))
    gaps = {}
    if functions is None or len(functions):
        ea, eb = WeakFormEngine(second), WeakFormEngine(first)
        fns = ea.default_catalog() if functions is None else functions
        for phi in fns:
            pa, pb = ea.pairings(phi), eb.pairings(phi)
            gaps[phi.id] = {"rho": abs(pa.rho - pb.rho), "e1": abs(pa.e1 - pb.e1)}
    return InertiaGap(float(a.epsilon), sup, gaps)
