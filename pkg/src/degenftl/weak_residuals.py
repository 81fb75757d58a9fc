"""Discrete weak-form identities for the density and momentum interpolants.

For a trajectory set and a test function ``phi`` two exact identities hold:

continuity::

    int int (rho phi_t + e1 phi_x) + int rho(0) phi(0) - int rho(T) phi(T) = R / N

    R = 1/2 sum_i int (v_{i+1} - v_i) (int phi_xx u^2 dx - phi_x(t, x_{i+1})) dt

momentum::

    int int [eps (e1 phi_t + e2 phi_x) + rho F phi - gamma e1/theta(rho) phi]
        + eps int e1(0) phi(0) - eps int e1(T) phi(T) = S / N + D

    S = N sum_i int rho_i int (F(t,x) - F(t,x_i)) phi dx dt

where ``u = (x - x_i)/(x_{i+1} - x_i)`` and ``D`` is the defect introduced by
the regularization, ``eps sum_i int rho_i x_i'' (zeta_i + delta - theta_i)/theta_i
int phi dx dt``; it vanishes for the unregularized system with ``zeta = theta``.
The terminal terms vanish for test functions with ``phi(T) = 0``.

Space integrals are cellwise Gauss-Legendre (see :mod:`quadrature`). Every
time integrand is a sum of products ``c g`` of a cell moment ``c`` of ``phi``,
which only depends on positions and varies slowly, with a cell quantity ``g``
such as ``rho_i v_i`` that jumps across the fast layers where a particle brakes
into a congested cluster. When the solver supplied per-interval integrals of
``g`` the product is integrated against the linear interpolant of ``c``;
otherwise ``c g`` is sampled on the output grid and integrated by the
trapezoid rule. Either way one Richardson step (grid halving) refines the
result, and the unrefined error estimate sets the declared tolerance.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .errors import BoundViolated, InsufficientPoints, SaturatedCellAtPositiveTime
from .interpolants import build_fields, trapezoid
from .quadrature import cell_moments
from .testfunctions import catalog

# identity tolerance never declared above this value
MAX_DECLARED_TOL = 1e-4


def time_integral(values, times):
    """Trapezoid rule refined by one Richardson step (grid halving) whenever the
    number of intervals is even; plain trapezoid otherwise."""
    values = np.asarray(values, dtype=float)
    m = values.size
    fine = trapezoid(values, times)
    if m < 3 or (m - 1) % 2:
        return fine
    coarse = trapezoid(values[::2], times[::2])
    return fine + (fine - coarse) / 3.0


def richardson_error(values, times):
    """Estimate of the trapezoid error from halving the grid (order 2)."""
    values = np.asarray(values, dtype=float)
    m = values.size
    if m < 3:
        return 0.0
    end = m if (m - 1) % 2 == 0 else m - 1
    fine = trapezoid(values[:end], times[:end])
    coarse = trapezoid(values[:end:2], times[:end:2])
    return abs(fine - coarse) / 3.0


def _richardson_pair(fine_parts, coarse_parts, m):
    """Sum of the fine interval contributions, extrapolated when ``m - 1`` is
    even, and the signed fine minus coarse difference over the even prefix."""
    end = (m - 1) - (m - 1) % 2
    fine_even = float(np.sum(fine_parts[:end]))
    diff = fine_even - float(np.sum(coarse_parts))
    total = float(np.sum(fine_parts))
    if m >= 3 and (m - 1) % 2 == 0:
        total += diff / 3.0
    return total, diff


def sampled_term(values, times):
    """``(integral, diff)`` of a sampled integrand by trapezoid plus Richardson."""
    values = np.asarray(values, dtype=float)
    dt = np.diff(times)
    fine = 0.5 * dt * (values[1:] + values[:-1])
    end = (values.size - 1) - (values.size - 1) % 2
    coarse = 0.5 * (times[2:end + 1:2] - times[0:end:2]) * (values[2:end + 1:2] + values[0:end:2])
    return _richardson_pair(fine, coarse, values.size)


def product_term(weight, first, second, shifts=()):
    """``(integral, diff)`` of ``sum_i c_i g_i`` from per-interval integrals of ``g``.

    ``weight`` holds ``c`` on the output grid (times by cells); ``first`` and
    ``second`` are ``int g`` and ``int g s`` per cell and interval. Each entry
    ``(slope, shifted, edge)`` of ``shifts`` adds the first-order correction
    ``slope * int g (edge(t) - linear interpolant of edge)`` for a weight that
    depends on a cell edge, given ``shifted = int g (edge(t) - edge(t_k))``.
    """
    c = np.asarray(weight, dtype=float)
    a = (first - second).T
    b = second.T
    m = c.shape[0]
    end = (m - 1) - (m - 1) % 2
    fine = np.sum(c[:-1] * a + c[1:] * b, axis=1)
    a0, b0 = a[0:end:2], b[0:end:2]
    a1, b1 = a[1:end:2], b[1:end:2]
    whole = a0 + b0 + a1 + b1
    late = 0.5 * (b0 + a1 + 2.0 * b1)
    coarse = np.sum(c[0:end:2] * (whole - late) + c[2:end + 1:2] * late, axis=1)
    for slope, shifted, edge in shifts:
        sl = np.asarray(slope, dtype=float)
        hs = shifted.T
        step = np.diff(edge, axis=0)
        fine = fine + np.sum(0.5 * (sl[:-1] + sl[1:]) * (hs - step * b), axis=1)
        hs2 = hs[0:end:2] + hs[1:end:2] + step[0:end:2] * (a1 + b1)
        step2 = edge[2:end + 1:2] - edge[0:end:2]
        coarse = coarse + np.sum(0.5 * (sl[0:end:2] + sl[2:end + 1:2]) * (hs2 - step2 * late), axis=1)
    return _richardson_pair(fine, coarse, m)


def remainder_constant(box_width, horizon, velocity_bound):
    """Constant ``C`` with ``|R| <= C (|phi_x|_inf + |phi_xx|_inf)``.

    Adds the two estimates of the cell-weight term and of the summation by
    parts term: ``(S-s)(S-s + T V) |phi_xx| + (S-s)(|phi_x| + T V |phi_xx| / 2)``.
    """
    w = box_width
    return w * max(1.0, w + 1.5 * horizon * velocity_bound)


def sum_by_parts(a, b):
    """Both sides of ``sum_{i<N} (a_{i+1}-a_i) b_i
    = a_N b_{N-1} - a_0 b_0 - sum_{i<N-1} (b_{i+1}-b_i) a_{i+1}``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    lhs = float(np.sum(np.diff(a) * b[: a.size - 1]))
    rhs = float(a[-1] * b[a.size - 2] - a[0] * b[0] - np.sum(np.diff(b[: a.size - 1]) * a[1:-1]))
    return lhs, rhs


@dataclass(frozen=True)
class ResidualReport:
    phi_id: str
    N: int
    eps: float
    lhs_cont: float
    R: float
    R_over_N: float
    gap_cont: float
    lhs_mom: float
    S: float
    S_over_N: float
    delta_defect: float
    gap_mom: float
    gap_mom_raw: float
    boundR: float
    boundS: float
    boundR_slack: float
    boundS_slack: float
    tol_cont: float
    tol_mom: float
    quad_error: float
    terminal: bool

    @property
    def identities_ok(self):
        return self.gap_cont <= self.tol_cont and self.gap_mom <= self.tol_mom

    @property
    def bounds_ok(self):
        return self.boundR_slack >= 0 and self.boundS_slack >= 0

    def as_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class Pairings:
    """Space-time pairings of the fields with one test function."""

    phi_id: str
    rho: float
    e1: float
    e2: float
    mobility: float
    rho_drift: float
    eps_bracket: float


class WeakFormEngine:
    """Evaluates identities, remainders and pairings on one trajectory set."""

    def __init__(self, traj, quad_tol=1e-11, order=8):
        self.traj = traj
        vc = traj.config
        self.vc = vc
        self.quad_tol = quad_tol
        self.order = order
        self.fields = build_fields(traj)
        rho, e1, e2 = self.fields
        self.times = np.asarray(traj.times)
        x = np.asarray(traj.positions).T
        v = np.asarray(traj.velocities).T
        self.x = x
        self.v = v
        self.n = x.shape[1] - 1
        self.rho = rho.values
        self.vi = v[:, :-1]
        self.dv = np.diff(v, axis=1)
        th = np.asarray(vc.theta(self.rho))
        ze = np.asarray(vc.zeta(self.rho))
        zero = th <= 0
        if np.any(zero[1:]):
            k, i = np.argwhere(zero[1:])[0]
            raise SaturatedCellAtPositiveTime(
                f"cell {i} saturated at t={self.times[k + 1]!r}", index=int(i))
        self.excluded_initial_cells = int(np.count_nonzero(zero[0]))
        safe = np.where(zero, 1.0, th)
        self.ratio = np.where(zero, 0.0, self.rho * self.vi / safe)
        fi = np.asarray(vc.drift(self.times[:, None], x[:, :-1]))
        eps_acc = (th * fi - vc.gamma * self.vi) / (ze + vc.delta)
        # eps x'' (zeta + delta - theta) / theta, cellwise
        self.defect_density = np.where(zero, 0.0, self.rho * eps_acc * (ze + vc.delta - th) / safe)
        self.samples = {
            "v": self.vi, "v2": self.vi ** 2, "v_v_ahead": self.vi * v[:, 1:],
            "mobility": np.where(zero, 0.0, self.vi / safe),
            "defect": np.where(zero, 0.0, eps_acc * (ze + vc.delta - th) / safe),
            "v_ahead": v[:, 1:],
        }
        self.integrals = getattr(traj, "interval_integrals", None)
        self.T = float(self.times[-1])
        self.box = (vc.s, vc.S)
        self.C_R = remainder_constant(vc.S - vc.s, vc.horizon, vc.velocity_bound)
        self._cache = {}

    # ------------------------------------------------------------------
    def moments(self, phi):
        if phi.id not in self._cache:
            self._cache[phi.id] = cell_moments(self.times, self.x, phi, self.vc.drift,
                                               order=self.order, tol=self.quad_tol)
        return self._cache[phi.id]

    def _terminal_terms(self, mom, k):
        rho, vi = self.rho[k], self.vi[k]
        return float(np.sum(rho * mom.I0[k])), float(np.sum(rho * vi * mom.I0[k]))

    def integrate(self, terms):
        """``(integral, diff)`` of ``sum c g`` over ``(c, name)`` pairs, with ``diff``
        the signed fine minus coarse difference used for error estimates.

        ``name`` selects the fast cell quantity ``g`` (``None`` for ``g = 1``);
        ``c`` is a slowly varying weight on the output grid, typically a density
        times a cell moment. A third entry ``(dc/dx_i, dc/dx_{i+1})`` requests
        the edge correction for quantities carrying braking impulses.
        """
        total = 0.0
        diff = 0.0
        sampled = 0.0
        for term in terms:
            weight, name = term[:2]
            if name is None:
                sampled = sampled + np.sum(weight, axis=1)
            elif self.integrals is None:
                sampled = sampled + np.sum(weight * self.samples[name], axis=1)
            else:
                shifts = ()
                if len(term) > 2:
                    left, right = term[2]
                    shifts = ((left, self.integrals.get(name + "_shift")[0], self.x[:, :-1]),
                              (right, self.integrals.get(name + "_shift_ahead")[0], self.x[:, 1:]))
                val, d = product_term(weight, *self.integrals.get(name), shifts=shifts)
                total += val
                diff += d
        if np.ndim(sampled):
            val, d = sampled_term(sampled, self.times)
            total += val
            diff += d
        return total, diff

    def _mass_slopes(self, phi, mom):
        """Derivatives of the cell mean ``rho_i int_{x_i}^{x_{i+1}} phi dx`` in the
        two cell edges."""
        t = self.times[:, None]
        mean = self.n * self.rho * mom.I0
        return (self.rho * (mean - phi.phi(t, self.x[:, :-1])),
                self.rho * (phi.phi(t, self.x[:, 1:]) - mean))

    def continuity_parts(self, phi):
        mom = self.moments(phi)
        rho = self.rho
        r0, _ = self._terminal_terms(mom, 0)
        rT, _ = self._terminal_terms(mom, -1)
        body, d_lhs = self.integrate([(rho * mom.It, None), (rho * mom.Ix, "v")])
        lhs = body + r0 - rT
        px_right = phi.phi_x(self.times[:, None], self.x[:, 1:])
        w = 0.5 * (mom.Ixx2 - px_right)
        R, d_R = self.integrate([(w, "v_ahead"), (-w, "v")])
        err_t = abs(d_lhs - d_R / self.n) / 3.0
        return lhs, R, err_t, mom.error

    def _bracket_terms(self, mom):
        """Terms of ``int (e1 phi_t + e2 phi_x)`` over the cells."""
        rho = self.rho
        return [(rho * mom.It, "v"), (rho * (mom.Ix - mom.Ixs), "v2"), (rho * mom.Ixs, "v_v_ahead")]

    def momentum_parts(self, phi):
        vc = self.vc
        mom = self.moments(phi)
        eps = vc.epsilon
        rho = self.rho
        left, right = self._mass_slopes(phi, mom)
        g = vc.gamma
        terms = [(eps * c, name) for c, name in self._bracket_terms(mom)] + [
            (rho * mom.IF, None),
            (-g * rho * mom.I0, "mobility", (-g * left, -g * right))]
        body, d_lhs = self.integrate(terms)
        _, e0 = self._terminal_terms(mom, 0)
        _, eT = self._terminal_terms(mom, -1)
        lhs = body + eps * e0 - eps * eT
        S, d_S = self.integrate([(self.n * rho * mom.IdF, None)])
        D, d_D = self.integrate([(rho * mom.I0, "defect", (left, right))])
        err_t = abs(d_lhs - d_S / self.n - d_D) / 3.0
        return lhs, S, D, err_t, mom.error

    def declared_tolerance(self, err_time, err_quad):
        """Identity tolerance for this run: ten times the estimated time and
        space discretization error plus a floor tied to the solver tolerance."""
        floor = 1e3 * self.traj.rtol * max(1.0, self.vc.velocity_bound)
        return min(MAX_DECLARED_TOL, 10.0 * (err_time + self.T * err_quad) + floor)

    def report(self, phi):
        vc = self.vc
        lhs_c, R, et_c, eq_c = self.continuity_parts(phi)
        lhs_m, S, D, et_m, eq_m = self.momentum_parts(phi)
        norms = phi.sup_norms(vc.horizon, *self.box)
        boundR = self.C_R * (norms["phi_x"] + norms["phi_xx"])
        boundS = vc.drift.lipschitz_x * vc.horizon * (vc.S - vc.s) * norms["phi"]
        n = self.n
        return ResidualReport(
            phi_id=phi.id, N=n, eps=float(vc.epsilon),
            lhs_cont=lhs_c, R=R, R_over_N=R / n, gap_cont=abs(lhs_c - R / n),
            lhs_mom=lhs_m, S=S, S_over_N=S / n, delta_defect=D,
            gap_mom=abs(lhs_m - S / n - D), gap_mom_raw=abs(lhs_m - S / n),
            boundR=boundR, boundS=boundS,
            boundR_slack=boundR - abs(R), boundS_slack=boundS - abs(S),
            tol_cont=self.declared_tolerance(et_c, eq_c),
            tol_mom=self.declared_tolerance(et_m, eq_m),
            quad_error=max(eq_c, eq_m), terminal=phi.terminal)

    def pairings(self, phi):
        mom = self.moments(phi)
        rho = self.rho
        _, e0 = self._terminal_terms(mom, 0)
        _, eT = self._terminal_terms(mom, -1)
        return Pairings(
            phi.id,
            rho=self.integrate([(rho * mom.I0, None)])[0],
            e1=self.integrate([(rho * mom.I0, "v")])[0],
            e2=self.integrate([(rho * (mom.I0 - mom.I0s), "v2"), (rho * mom.I0s, "v_v_ahead")])[0],
            mobility=self.integrate([(rho * mom.I0, "mobility", self._mass_slopes(phi, mom))])[0],
            rho_drift=self.integrate([(rho * mom.IF, None)])[0],
            eps_bracket=self.integrate(self._bracket_terms(mom))[0] + e0 - eT,
        )

    def default_catalog(self):
        return catalog(self.vc.horizon, *self.box)


def continuity_residual(traj, phi, engine: Optional[WeakFormEngine] = None):
    """``(lhs, R, gap)`` of the density identity."""
    eng = engine or WeakFormEngine(traj)
    lhs, R, _, _ = eng.continuity_parts(phi)
    return lhs, R, abs(lhs - R / eng.n)


def momentum_residual(traj, phi, engine: Optional[WeakFormEngine] = None):
    """``(lhs, S, gap)`` of the momentum identity, regularization defect included."""
    eng = engine or WeakFormEngine(traj)
    lhs, S, D, _, _ = eng.momentum_parts(phi)
    return lhs, S, abs(lhs - S / eng.n - D)


def residual_reports(traj, functions=None, engine=None):
    eng = engine or WeakFormEngine(traj)
    functions = eng.default_catalog() if functions is None else functions
    return [eng.report(phi) for phi in functions]


def remainder_bound_check(reports, raise_on_failure=False):
    """Check both remainder bounds on each report.

    Returns ``(passed, [(phi_id, boundR_slack, boundS_slack), ...])``.
    """
    rows = [(r.phi_id, r.boundR_slack, r.boundS_slack) for r in reports]
    bad = [r for r in reports if not r.bounds_ok]
    if bad and raise_on_failure:
        names = ", ".join(f"{r.phi_id} (N={r.N})" for r in bad)
        raise BoundViolated(f"remainder bound violated for {names}")
    return not bad, rows


@dataclass(frozen=True)
class DecayFit:
    phi_id: str
    quantity: str
    slope: float
    residual: float
    vanishing: bool


def fit_loglog(ns, values, phi_id="", quantity="", zero_tol=1e-300):
    """Least-squares slope of ``log|value|`` against ``log N``.

    A series that is identically zero is reported with ``vanishing=True`` and
    a NaN slope.
    """
    ns = np.asarray(ns, dtype=float)
    vals = np.abs(np.asarray(values, dtype=float))
    if ns.size < 2:
        raise InsufficientPoints(f"need at least 2 points for a fit, got {ns.size}")
    if np.all(vals <= zero_tol):
        return DecayFit(phi_id, quantity, math.nan, 0.0, True)
    if np.any(vals <= zero_tol):
        raise InsufficientPoints(f"{quantity} for {phi_id} vanishes at some but not all N")
    coef, res, *_ = np.polyfit(np.log(ns), np.log(vals), 1, full=True)
    return DecayFit(phi_id, quantity, float(coef[0]), float(res[0]) if res.size else 0.0, False)


def decay_study(reports):
    """Fit decay exponents of ``|R/N|`` and ``|S/N|`` per test function.

    ``reports`` is an iterable of :class:`ResidualReport` spanning several N.
    """
    by_phi = {}
    for r in reports:
        by_phi.setdefault(r.phi_id, []).append(r)
    fits = []
    for phi_id, rs in by_phi.items():
        rs = sorted(rs, key=lambda r: r.N)
        ns = [r.N for r in rs]
        if len(set(ns)) < 2:
            raise InsufficientPoints(f"decay study for {phi_id} needs at least two values of N")
        fits.append(fit_loglog(ns, [r.R_over_N for r in rs], phi_id, "R_over_N"))
        fits.append(fit_loglog(ns, [r.S_over_N for r in rs], phi_id, "S_over_N"))
    return fits
