"""Cellwise Gauss-Legendre moments of a test function over moving cells."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import QuadratureFailure

MOMENTS = ("I0", "I0s", "It", "Ix", "Ixs", "Ixx2", "IF", "IdF")


def gauss_legendre_unit(n):
    """Nodes and weights of the ``n``-point rule on ``[0, 1]``."""
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


@dataclass(frozen=True, eq=False)
class CellMoments:
    """Per-cell integrals over ``[x_i, x_{i+1}]`` at each output time.

    With ``u = (x - x_i) / (x_{i+1} - x_i)``:

    ``I0 = int phi``, ``I0s = int phi u``, ``It = int phi_t``, ``Ix = int phi_x``,
    ``Ixs = int phi_x u``, ``Ixx2 = int phi_xx u^2``, ``IF = int F phi`` and
    ``IdF = int (F(t,x) - F(t,x_i)) phi``. Each array has shape ``(M, N)``.
    ``error`` is an estimate of the largest per-slice sum of absolute errors.
    """

    I0: np.ndarray
    I0s: np.ndarray
    It: np.ndarray
    Ix: np.ndarray
    Ixs: np.ndarray
    Ixx2: np.ndarray
    IF: np.ndarray
    IdF: np.ndarray
    order: int
    error: float


def _moments_piece(phi, drift, t, xl, d, a, b, order):
    """Moments restricted to ``[a, b]`` inside cells ``[xl, xl + d]``."""
    u, w = gauss_legendre_unit(order)
    span = b - a
    X = a[..., None] + span[..., None] * u
    U = (X - xl[..., None]) / d[..., None]
    W = span[..., None] * w
    T = t[:, None, None]
    P = phi.phi(T, X)
    Px = phi.phi_x(T, X)
    F = np.asarray(drift(T, X))
    Fi = np.asarray(drift(t[:, None], xl))[..., None]
    WP = W * P
    WPx = W * Px
    return {
        "I0": WP.sum(-1),
        "I0s": (WP * U).sum(-1),
        "It": (W * phi.phi_t(T, X)).sum(-1),
        "Ix": WPx.sum(-1),
        "Ixs": (WPx * U).sum(-1),
        "Ixx2": (W * phi.phi_xx(T, X) * U * U).sum(-1),
        "IF": (WP * F).sum(-1),
        "IdF": (WP * (F - Fi)).sum(-1),
    }


def _moments_slice(phi, drift, t, xl, d, order):
    xr = xl + d
    cuts = [np.clip(c, xl, xr) for c in getattr(phi, "kinks", ())]
    edges = [xl, *cuts, xr]
    out = None
    for a, b in zip(edges[:-1], edges[1:]):
        part = _moments_piece(phi, drift, t, xl, d, a, b, order)
        if out is None:
            out = part
        else:
            for k in MOMENTS:
                out[k] += part[k]
    return out


def _slice_error(a, b):
    return max(float(np.max(np.sum(np.abs(a[k] - b[k]), axis=-1))) for k in MOMENTS)


def cell_moments(times, breakpoints, phi, drift, order=8, tol=1e-11, max_order=64,
                 check_stride=16, chunk=32):
    """Moments of ``phi`` over every cell and output time.

    The rule order is chosen by doubling: on a strided subset of time slices
    (always including the first and last) order ``n`` is compared with ``2n``
    until the per-slice absolute difference is below ``tol``; the accepted
    order is then applied to all slices.
    """
    times = np.asarray(times, dtype=float)
    bp = np.asarray(breakpoints, dtype=float)
    xl = bp[:, :-1]
    d = np.diff(bp, axis=1)
    m = times.size
    probe = np.unique(np.concatenate([np.arange(0, m, max(1, check_stride)), [m - 1]]))
    n = order
    err = np.inf
    while True:
        lo = _moments_slice(phi, drift, times[probe], xl[probe], d[probe], n)
        hi = _moments_slice(phi, drift, times[probe], xl[probe], d[probe], 2 * n)
        err = _slice_error(lo, hi)
        scale = max(1.0, max(float(np.max(np.sum(np.abs(hi[k]), axis=-1))) for k in MOMENTS))
        if err <= tol * scale:
            break
        n *= 2
        if 2 * n > max_order:
            raise QuadratureFailure(
                f"cell quadrature for {phi.id!r} did not settle by order {max_order} (error {err:g})")
    out = {k: np.empty((m, d.shape[1])) for k in MOMENTS}
    for a in range(0, m, chunk):
        b = min(m, a + chunk)
        res = _moments_slice(phi, drift, times[a:b], xl[a:b], d[a:b], 2 * n)
        for k in MOMENTS:
            out[k][a:b] = res[k]
    return CellMoments(order=2 * n, error=err, **out)
