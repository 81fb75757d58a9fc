"""Piecewise macroscopic fields built from particle trajectories.

For each output time the cells ``[x_i, x_{i+1})`` carry

* density ``rho_i = 1 / (N (x_{i+1} - x_i))``,
* momentum ``rho_i v_i``,
* an affine second moment ``rho_i v_i (v_i + (v_{i+1} - v_i)(x - x_i)/(x_{i+1} - x_i))``.

Fields vanish outside ``[x_0, x_N)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DegenerateGap, SaturatedCellAtPositiveTime

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class PiecewiseField:
    """Cellwise constant or affine field sampled at the output times.

    ``breakpoints`` has shape ``(M, N+1)``; ``values`` and (for affine fields)
    ``slopes`` have shape ``(M, N)``. On cell ``i`` at time ``k`` the field is
    ``values[k, i] + slopes[k, i] * (x - breakpoints[k, i])``.
    """

    name: str
    times: np.ndarray
    breakpoints: np.ndarray
    values: np.ndarray
    slopes: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    @property
    def affine(self):
        return self.slopes is not None

    @property
    def widths(self):
        return np.diff(self.breakpoints, axis=1)

    def right_values(self):
        """Limit of the field at the right end of each cell."""
        if self.slopes is None:
            return self.values
        return self.values + self.slopes * self.widths

    def time_index(self, t):
        """Index of the output time nearest to ``t`` (ties go to the earlier one)."""
        ts = self.times
        k = int(np.searchsorted(ts, t))
        if k <= 0:
            return 0
        if k >= ts.size:
            return ts.size - 1
        return k if (ts[k] - t) < (t - ts[k - 1]) else k - 1

    def evaluate(self, t, x):
        return evaluate(self, t, x)


def build_fields(traj):
    """Return ``(rho, e1, e2)`` as :class:`PiecewiseField` over the output grid."""
    x = np.asarray(traj.positions).T  # (M, N+1)
    v = np.asarray(traj.velocities).T
    n = x.shape[1] - 1
    d = np.diff(x, axis=1)
    if np.any(~(d > 0)):
        k, i = np.argwhere(~(d > 0))[0]
        raise DegenerateGap(f"nonpositive gap for cell {i} at t={traj.times[k]!r}", index=int(i))
    rho = 1.0 / (n * d)
    vi = v[:, :-1]
    dv = np.diff(v, axis=1)
    e1 = rho * vi
    e2_slope = rho * vi * dv / d
    times = np.asarray(traj.times)
    return (PiecewiseField("rho", times, x, rho),
            PiecewiseField("e1", times, x, e1),
            PiecewiseField("e2", times, x, rho * vi * vi, e2_slope))


def evaluate(field: PiecewiseField, t, x):
    """Value at ``(t, x)`` using the nearest output time.

    Cells are left-closed and right-open, so ``x = x_i`` falls in cell ``i``
    and the field is zero from ``x_N`` on.
    """
    k = field.time_index(t)
    bp = field.breakpoints[k]
    xs = np.asarray(x, dtype=float)
    i = np.searchsorted(bp, xs, side="right") - 1
    inside = (i >= 0) & (i < bp.size - 1)
    ic = np.clip(i, 0, bp.size - 2)
    out = field.values[k, ic].astype(float)
    if field.slopes is not None:
        out = out + field.slopes[k, ic] * (xs - bp[ic])
    out = np.where(inside, out, 0.0)
    return float(out) if out.ndim == 0 else out


def _affine_abs_integral(c, s, w):
    """Exact integral of ``|c + s u|`` for ``u`` in ``[0, w]``, elementwise."""
    c1 = c + s * w
    same = (c * c1) >= 0
    full = 0.5 * (np.abs(c) + np.abs(c1)) * w
    with np.errstate(divide="ignore", invalid="ignore"):
        root = np.where(s != 0, -c / np.where(s != 0, s, 1.0), 0.0)
    split = 0.5 * np.abs(c) * root + 0.5 * np.abs(c1) * (w - root)
    return np.where(same, full, split)


def l1_per_time(field: PiecewiseField):
    w = field.widths
    if field.slopes is None:
        return np.sum(np.abs(field.values) * w, axis=1)
    return np.sum(_affine_abs_integral(field.values, field.slopes, w), axis=1)


def integral_per_time(field: PiecewiseField):
    """Exact spatial integral of the field at each output time."""
    w = field.widths
    if field.slopes is None:
        return np.sum(field.values * w, axis=1)
    return np.sum((field.values + 0.5 * field.slopes * w) * w, axis=1)


def trapezoid(values, times):
    values = np.asarray(values, dtype=float)
    return float(np.sum(0.5 * (values[1:] + values[:-1]) * np.diff(times)))


def norms_and_support(field: PiecewiseField):
    """Sup norm, L1 norm in ``x`` per time, and support interval per time.

    The support of a time slice is the closure-free interval spanned by cells
    where the field is not identically zero; ``None`` for an all-zero slice.
    """
    vals = np.abs(field.values)
    rvals = np.abs(field.right_values())
    sup = float(max(np.max(vals, initial=0.0), np.max(rvals, initial=0.0)))
    l1 = l1_per_time(field)
    supports = []
    for k in range(field.times.size):
        nz = np.nonzero((vals[k] > 0) | (rvals[k] > 0))[0]
        if nz.size == 0:
            supports.append(None)
        else:
            supports.append((float(field.breakpoints[k, nz[0]]), float(field.breakpoints[k, nz[-1] + 1])))
    return {"sup": sup, "l1": l1, "support": supports}


def mass(field: PiecewiseField):
    """Total mass per time slice; exactly ``sum(1/N)`` for the density."""
    return integral_per_time(field)


def mobility_ratio_field(traj, theta=None):
    """Field ``rho_i v_i / theta(rho_i)`` and its space-time L1 norm.

    Cells with ``theta = 0`` at ``t = 0`` are excluded (set to 0) and counted
    in ``meta["excluded_initial_cells"]``; at positive times they raise
    :class:`SaturatedCellAtPositiveTime`.
    """
    vc = traj.config
    theta = vc.theta if theta is None else theta
    rho, e1, _ = build_fields(traj)
    th = np.asarray(theta(rho.values))
    zero = th <= 0
    if np.any(zero[1:]):
        k, i = np.argwhere(zero[1:])[0]
        raise SaturatedCellAtPositiveTime(
            f"cell {i} saturated at t={traj.times[k + 1]!r}", index=int(i), time=float(traj.times[k + 1]))
    excluded = int(np.count_nonzero(zero[0]))
    if excluded:
        log.info("excluding %d saturated cells at t=0 from the mobility ratio", excluded)
    safe = np.where(zero, 1.0, th)
    vals = np.where(zero, 0.0, e1.values / safe)
    fld = PiecewiseField("mobility_ratio", rho.times, rho.breakpoints, vals,
                         meta={"excluded_initial_cells": excluded})
    return fld, trapezoid(l1_per_time(fld), rho.times)


@dataclass(frozen=True, eq=False)
class MacroscopicInitialData:
    rho0: PiecewiseField
    e1_0: PiecewiseField

    def check(self, rho_bar, s, S):
        """Return the list of violated invariants (empty when valid)."""
        problems = []
        sup = float(np.max(self.rho0.values))
        if sup > rho_bar * (1 + 1e-12):
            problems.append(f"initial density sup {sup!r} exceeds {rho_bar!r}")
        bp = self.rho0.breakpoints[0]
        if bp[0] < s - 1e-12 or bp[-1] > S + 1e-12:
            problems.append(f"initial support [{bp[0]!r}, {bp[-1]!r}] not within [{s!r}, {S!r}]")
        return problems


def initial_data(fields):
    rho, e1 = fields[0], fields[1]

    def first(f):
        return PiecewiseField(f.name + "0", f.times[:1], f.breakpoints[:1], f.values[:1],
                              None if f.slopes is None else f.slopes[:1])

    return MacroscopicInitialData(first(rho), first(e1))
