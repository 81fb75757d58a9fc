"""Hot loops of the cascade solver.

Every function here is written in the numba-compatible subset of Python and
numpy. With numba importable and ``DEGENFTL_NO_NUMBA`` unset (or ``0``) they are
compiled with ``numba.njit``; otherwise the very same source runs as plain
Python, which is the reference fallback path.

Encodings used across the kernels (flat tuples; arrays are only touched in
the branch that needs them, which keeps per-call overhead small):

nonlinearity pack  ``(kind, alpha, rho_bar, breakpoints, values)``
    kind 0 = power law ``(1 - rho/rho_bar)**alpha``, kind 1 = tabulated
    piecewise-linear on ``breakpoints`` (last breakpoint equals ``rho_bar``).

profile fields     ``kind, p0, p1, p2, p3, xs, ys``
    kind 0 = constant ``p0``, kind 1 = ``p0 + p1*sin(p2*u + p3)``,
    kind 2 = piecewise-linear table clamped at both ends.

drift pack         ``(kind, <time profile fields>, <space profile fields>,
                    grid_t, grid_x, grid_v)`` (18 entries)
    kind 0 = constant time-profile value, kind 1 = separable product,
    kind 2 = bilinear table on ``grid_t x grid_x`` clamped outside.
"""

import math
import os

import numpy as np

_FLAG = os.environ.get("DEGENFTL_NO_NUMBA", "0").strip().lower()

try:
    if _FLAG in ("1", "true", "yes"):
        raise ImportError("numba disabled by DEGENFTL_NO_NUMBA")
    from numba import njit

    USE_NUMBA = True
except ImportError:
    USE_NUMBA = False


def jit(func):
    if USE_NUMBA:
        return njit(cache=True)(func)
    return func


def jit_inline(func):
    """Like :func:`jit` but inlined into callers at the numba IR level."""
    if USE_NUMBA:
        return njit(cache=True, inline="always")(func)
    return func


# status codes returned by the cascade
OK = 0
ORDERING = 1
UNDERFLOW = 2
MAX_STEPS = 3


# ---------------------------------------------------------------- model data


@jit_inline
def interp_clamped(xs, ys, u):
    n = xs.shape[0]
    if u <= xs[0]:
        return ys[0]
    if u >= xs[n - 1]:
        return ys[n - 1]
    j = np.searchsorted(xs, u, side="right") - 1
    w = (u - xs[j]) / (xs[j + 1] - xs[j])
    return ys[j] + w * (ys[j + 1] - ys[j])


@jit_inline
def nonlin_eval(pack, rho):
    rho_bar = pack[2]
    if rho >= rho_bar:
        return 0.0
    if pack[0] == 0:
        if rho <= 0.0:
            return 1.0
        return (1.0 - rho / rho_bar) ** pack[1]
    return interp_clamped(pack[3], pack[4], rho)


@jit_inline
def profile_eval(kind, p0, p1, p2, p3, xs, ys, u):
    if kind == 0:
        return p0
    if kind == 1:
        return p0 + p1 * math.sin(p2 * u + p3)
    return interp_clamped(xs, ys, u)


@jit_inline
def bilinear_clamped(ts, xs, vals, t, x):
    nt = ts.shape[0]
    nx = xs.shape[0]
    if t <= ts[0]:
        i, wt = 0, 0.0
    elif t >= ts[nt - 1]:
        i, wt = nt - 2, 1.0
    else:
        i = np.searchsorted(ts, t, side="right") - 1
        wt = (t - ts[i]) / (ts[i + 1] - ts[i])
    if x <= xs[0]:
        j, wx = 0, 0.0
    elif x >= xs[nx - 1]:
        j, wx = nx - 2, 1.0
    else:
        j = np.searchsorted(xs, x, side="right") - 1
        wx = (x - xs[j]) / (xs[j + 1] - xs[j])
    v00 = vals[i, j]
    v01 = vals[i, j + 1]
    v10 = vals[i + 1, j]
    v11 = vals[i + 1, j + 1]
    return (1.0 - wt) * ((1.0 - wx) * v00 + wx * v01) + wt * ((1.0 - wx) * v10 + wx * v11)


@jit_inline
def drift_eval(pk, t, x):
    kind = pk[0]
    if kind == 0:
        return pk[2]
    if kind == 1:
        return (profile_eval(pk[1], pk[2], pk[3], pk[4], pk[5], pk[6], pk[7], t)
                * profile_eval(pk[8], pk[9], pk[10], pk[11], pk[12], pk[13], pk[14], x))
    return bilinear_clamped(pk[15], pk[16], pk[17], t, x)


# ------------------------------------------------------- hermite dense output


@jit_inline
def locate(ts, n, j, t):
    """Advance ``j`` so that ``ts[j] <= t <= ts[j+1]`` (clamped to the last segment)."""
    if j > n - 2:
        j = n - 2
    if j < 0:
        j = 0
    while j < n - 2 and ts[j + 1] < t:
        j += 1
    return j


@jit_inline
def hermite_eval(ts, xs, vs, j, t):
    h = ts[j + 1] - ts[j]
    s = (t - ts[j]) / h
    s2 = s * s
    om = 1.0 - s
    om2 = om * om
    return ((1.0 + 2.0 * s) * om2 * xs[j] + s * om2 * h * vs[j]
            + s2 * (3.0 - 2.0 * s) * xs[j + 1] + s2 * (s - 1.0) * h * vs[j + 1])


@jit
def hermite_deriv(ts, xs, vs, j, t):
    h = ts[j + 1] - ts[j]
    s = (t - ts[j]) / h
    s2 = s * s
    return ((6.0 * s2 - 6.0 * s) * (xs[j] - xs[j + 1]) / h
            + (3.0 * s2 - 4.0 * s + 1.0) * vs[j] + (3.0 * s2 - 2.0 * s) * vs[j + 1])


# ------------------------------------------------------- exponential update


@jit_inline
def phi1(z):
    """(1 - exp(-z)) / z, stable near 0."""
    if z < 1e-5:
        return 1.0 - z / 2.0 + z * z / 6.0 - z * z * z / 24.0
    return -math.expm1(-z) / z


@jit_inline
def phi2(z):
    """(exp(-z) - 1 + z) / z**2, stable near 0."""
    if z < 1e-3:
        return 0.5 - z / 6.0 + z * z / 24.0 - z * z * z / 120.0 + z * z * z * z / 720.0
    return (math.expm1(-z) + z) / (z * z)


@jit_inline
def exp_update(y, v, h, a0, a1, r0, r1):
    """Integrating-factor step of ``v' = r (a - v)``, ``y' = v`` over ``h``.

    ``a`` is reconstructed linearly between ``a0`` and ``a1``; the rate is
    frozen at the average of ``r0`` and ``r1``. Both outputs are written as
    nonnegative combinations of ``v, a0, a1`` so sign and upper bound survive
    rounding.
    """
    z = 0.5 * (r0 + r1) * h
    e = math.exp(-z)
    p1 = phi1(z)
    p2 = phi2(z)
    c_v = max(p1 - e, 0.0)
    c_1 = max(1.0 - p1, 0.0)
    v1 = a1 * c_1 + a0 * c_v + v * e
    d0 = max(0.5 - p1 + p2, 0.0)
    d1 = max(0.5 - p2, 0.0)
    y1 = y + h * (a0 * d0 + a1 * d1 + v * p1)
    return y1, v1, z


@jit_inline
def coefficients(nn, eps, gamma, delta, th_pack, ze_pack, dr_pack, t, y, ahead):
    """Forcing ``theta F / gamma``, rate ``gamma / (eps (zeta + delta))`` and zeta."""
    rho = 1.0 / (nn * (ahead - y))
    th = nonlin_eval(th_pack, rho)
    ze = nonlin_eval(ze_pack, rho)
    f = drift_eval(dr_pack, t, y)
    return th * f / gamma, gamma / (eps * (ze + delta)), ze


@jit
def step_control(err, h):
    if err <= 0.0:
        return 5.0 * h
    fac = 0.9 * err ** (-1.0 / 3.0)
    if fac > 5.0:
        fac = 5.0
    if fac < 0.2:
        fac = 0.2
    return fac * h


@jit_inline
def substep(t, y, v, t1, a0, r0, at, ax, av, na, j,
            nn, eps, gamma, delta, th_pack, ze_pack, dr_pack, gap_guard):
    """Predictor with frozen coefficients, then one corrector pass with the
    forcing reconstructed linearly and the rate averaged over the step.

    Returns ``(ok, y1, v1, j1, xa1)``; ``ok`` is False when the predicted
    gap would cross the collision guard.
    """
    hh = t1 - t
    y1p, v1p, z = exp_update(y, v, hh, a0, a0, r0, r0)
    j1 = locate(at, na, j, t1)
    xa1 = hermite_eval(at, ax, av, j1, t1)
    if xa1 - y1p <= gap_guard:
        return False, y1p, v1p, j1, xa1
    a1, r1, ze1 = coefficients(nn, eps, gamma, delta, th_pack, ze_pack, dr_pack, t1, y1p, xa1)
    y1, v1, z = exp_update(y, v, hh, a0, a1, r0, r1)
    return True, y1, v1, j1, xa1


@jit
def particle_step(t, y, v, h, t_stop, xa_t, at, ax, av, na, j,
                  nn, eps, gamma, delta, th_pack, ze_pack, dr_pack,
                  rtol, atol, vscale, zeta_small, gap_guard, h_min):
    """One accepted step of particle ``i`` against the dense leader-side buffer.

    The local error is estimated by step doubling: one full substep against
    two half substeps; the half-step result is kept.

    Returns ``(status, t1, y1, v1, h_next, j1, xa1, rejected, tm, ym, vm)``
    where ``(tm, ym, vm)`` is the accepted midpoint state.
    """
    a0, r0, ze0 = coefficients(nn, eps, gamma, delta, th_pack, ze_pack, dr_pack, t, y, xa_t)
    rejected = 0
    while True:
        hh = h
        clipped = False
        if zeta_small > 0.0 and ze0 < zeta_small and hh > 0.5 / r0:
            hh = 0.5 / r0
        if hh >= t_stop - t:
            hh = t_stop - t
            clipped = True
        if hh < h_min and not clipped:
            return UNDERFLOW, t, y, v, h, j, xa_t, rejected, t, y, v
        t1 = t_stop if clipped else t + hh
        tm = t + 0.5 * hh
        ok, yf, vf, jf, xaf = substep(t, y, v, t1, a0, r0, at, ax, av, na, j,
                                      nn, eps, gamma, delta, th_pack, ze_pack, dr_pack, gap_guard)
        if not ok:
            h = 0.5 * hh
            rejected += 1
            continue
        ok, ym, vm, jm, xam = substep(t, y, v, tm, a0, r0, at, ax, av, na, j,
                                      nn, eps, gamma, delta, th_pack, ze_pack, dr_pack, gap_guard)
        if not ok:
            h = 0.5 * hh
            rejected += 1
            continue
        if xam - ym <= gap_guard:
            h = 0.5 * hh
            rejected += 1
            continue
        am, rm, zem = coefficients(nn, eps, gamma, delta, th_pack, ze_pack, dr_pack, tm, ym, xam)
        ok, y1, v1, j1, xa1 = substep(tm, ym, vm, t1, am, rm, at, ax, av, na, jm,
                                      nn, eps, gamma, delta, th_pack, ze_pack, dr_pack, gap_guard)
        if not ok:
            h = 0.5 * hh
            rejected += 1
            continue
        sy = atol + rtol * max(abs(y), abs(y1))
        sv = atol + rtol * max(max(abs(v), abs(v1)), vscale)
        err = max(abs(y1 - yf) / sy, abs(v1 - vf) / sv)
        if err <= 1.0:
            h_next = step_control(err, hh)
            if clipped and h_next < h:
                h_next = h
            if xa1 - y1 <= gap_guard:
                return ORDERING, t1, y1, v1, h_next, j1, xa1, rejected, tm, ym, vm
            return OK, t1, y1, v1, h_next, j1, xa1, rejected, tm, ym, vm
        h = step_control(err, hh)
        rejected += 1


# per-cell quantities integrated over each output interval during the cascade
Q_V = 0
Q_V2 = 1
Q_V_V_AHEAD = 2
Q_MOBILITY = 3
Q_DEFECT = 4
Q_V_AHEAD = 5
# mobility and defect weighted by the displacement of either cell edge since t_k
Q_MOBILITY_SHIFT = 6
Q_MOBILITY_SHIFT_AHEAD = 7
Q_DEFECT_SHIFT = 8
Q_DEFECT_SHIFT_AHEAD = 9
N_QUANTITIES = 10


@jit_inline
def cell_quantities(out, nn, eps, gamma, delta, th_pack, ze_pack, dr_pack, t, y, v, xa, va,
                    yk, xak):
    rho = 1.0 / (nn * (xa - y))
    th = nonlin_eval(th_pack, rho)
    ze = nonlin_eval(ze_pack, rho)
    out[Q_V] = v
    out[Q_V2] = v * v
    out[Q_V_V_AHEAD] = v * va
    if th > 0.0:
        eps_acc = (th * drift_eval(dr_pack, t, y) - gamma * v) / (ze + delta)
        out[Q_MOBILITY] = v / th
        out[Q_DEFECT] = eps_acc * (ze + delta - th) / th
    else:
        out[Q_MOBILITY] = 0.0
        out[Q_DEFECT] = 0.0
    out[Q_V_AHEAD] = va
    out[Q_MOBILITY_SHIFT] = out[Q_MOBILITY] * (y - yk)
    out[Q_MOBILITY_SHIFT_AHEAD] = out[Q_MOBILITY] * (xa - xak)
    out[Q_DEFECT_SHIFT] = out[Q_DEFECT] * (y - yk)
    out[Q_DEFECT_SHIFT_AHEAD] = out[Q_DEFECT] * (xa - xak)


@jit
def accumulate_step(G0, G1, i, k, tk, hk, yk, xak, t0, y0, v0, tm, ym, vm, t1, y1, v1,
                    at, ax, av, na, j, nn, eps, gamma, delta, th_pack, ze_pack, dr_pack, buf):
    """Simpson rule over one accepted step for ``int g dt`` and
    ``int g (t - t_k) / h_k dt`` of every cell quantity ``g``."""
    h = t1 - t0
    for node in range(3):
        if node == 0:
            tt, yy, vv, w = t0, y0, v0, h / 6.0
        elif node == 1:
            tt, yy, vv, w = tm, ym, vm, 4.0 * h / 6.0
        else:
            tt, yy, vv, w = t1, y1, v1, h / 6.0
        j = locate(at, na, j, tt)
        xa = hermite_eval(at, ax, av, j, tt)
        va = hermite_deriv(at, ax, av, j, tt)
        cell_quantities(buf, nn, eps, gamma, delta, th_pack, ze_pack, dr_pack, tt, yy, vv, xa, va,
                        yk, xak)
        s = (tt - tk) / hk
        for q in range(N_QUANTITIES):
            G0[q, i, k] += w * buf[q]
            G1[q, i, k] += w * s * buf[q]


@jit
def _grow(buf, n):
    out = np.empty(2 * buf.shape[0])
    out[:n] = buf[:n]
    return out


@jit
def solve_cascade(nn, eps, gamma, delta, x0, vstart, th_pack, ze_pack, dr_pack,
                  lt, lx, lv, out_t, rtol, atol, vscale, zeta_small, gap_guard,
                  h0, h_min, max_steps, accumulate):
    """Backward cascade ``i = N-1, ..., 0`` over the delta-regularized system.

    With ``accumulate`` set, ``G0[q, i, k]`` and ``G1[q, i, k]`` receive
    ``int g`` and ``int g s`` over ``[t_k, t_{k+1}]`` (``s`` the local
    coordinate in ``[0, 1]``) for each cell quantity ``g``, integrated on the
    solver's own steps so that fast velocity layers are resolved.

    Returns ``(X, V, G0, G1, status, failed_index, failed_time, steps, rejects)``.
    """
    m = out_t.shape[0]
    n_part = nn + 1
    X = np.zeros((n_part, m))
    V = np.zeros((n_part, m))
    if accumulate:
        G0 = np.zeros((N_QUANTITIES, nn, m - 1))
        G1 = np.zeros((N_QUANTITIES, nn, m - 1))
    else:
        G0 = np.zeros((N_QUANTITIES, 1, 1))
        G1 = np.zeros((N_QUANTITIES, 1, 1))
    buf = np.empty(N_QUANTITIES)
    steps = np.zeros(nn, dtype=np.int64)
    rejects = np.zeros(nn, dtype=np.int64)
    nl = lt.shape[0]
    j = 0
    for k in range(m):
        j = locate(lt, nl, j, out_t[k])
        X[nn, k] = hermite_eval(lt, lx, lv, j, out_t[k])
        V[nn, k] = hermite_deriv(lt, lx, lv, j, out_t[k])

    at = lt.copy()
    ax = lx.copy()
    av = lv.copy()
    na = nl
    for i in range(nn - 1, -1, -1):
        cap = 256
        ct = np.empty(cap)
        cx = np.empty(cap)
        cv = np.empty(cap)
        t = out_t[0]
        y = x0[i]
        v = vstart[i]
        ct[0] = t
        cx[0] = y
        cv[0] = v
        nc = 1
        X[i, 0] = y
        V[i, 0] = v
        j = 0
        xa_t = hermite_eval(at, ax, av, 0, t)
        h = h0
        k = 1
        while k < m:
            t_prev, y_prev, v_prev, j_prev = t, y, v, j
            status, t, y, v, h, j, xa_t, rej, tm, ym, vm = particle_step(
                t, y, v, h, out_t[k], xa_t, at, ax, av, na, j,
                nn, eps, gamma, delta, th_pack, ze_pack, dr_pack,
                rtol, atol, vscale, zeta_small, gap_guard, h_min)
            rejects[i] += rej
            if status != OK:
                X[i, k:] = y
                V[i, k:] = v
                return X, V, G0, G1, status, i, t, steps, rejects
            steps[i] += 1
            if steps[i] > max_steps:
                return X, V, G0, G1, MAX_STEPS, i, t, steps, rejects
            if accumulate:
                accumulate_step(G0, G1, i, k - 1, out_t[k - 1], out_t[k] - out_t[k - 1],
                                X[i, k - 1], X[i + 1, k - 1],
                                t_prev, y_prev, v_prev, tm, ym, vm, t, y, v,
                                at, ax, av, na, j_prev, nn, eps, gamma, delta,
                                th_pack, ze_pack, dr_pack, buf)
            if nc + 2 > ct.shape[0]:
                ct = _grow(ct, nc)
                cx = _grow(cx, nc)
                cv = _grow(cv, nc)
            ct[nc] = tm
            cx[nc] = ym
            cv[nc] = vm
            nc += 1
            ct[nc] = t
            cx[nc] = y
            cv[nc] = v
            nc += 1
            if t == out_t[k]:
                X[i, k] = y
                V[i, k] = v
                k += 1
        at = ct[:nc].copy()
        ax = cx[:nc].copy()
        av = cv[:nc].copy()
        na = nc
    return X, V, G0, G1, OK, -1, 0.0, steps, rejects


# ----------------------------------------------------- vectorized evaluators


@jit
def nonlin_eval_array(pack, rho):
    out = np.empty(rho.shape[0])
    for k in range(rho.shape[0]):
        out[k] = nonlin_eval(pack, rho[k])
    return out


@jit
def drift_eval_array(pack, t, x):
    out = np.empty(t.shape[0])
    for k in range(t.shape[0]):
        out[k] = drift_eval(pack, t[k], x[k])
    return out


@jit
def first_order_rhs(nn, gamma, th_pack, dr_pack, t, x, x_lead, out):
    """Right side of ``gamma x_i' = theta(rho_i) F(t, x_i)`` for i < N."""
    for i in range(nn):
        ahead = x_lead if i == nn - 1 else x[i + 1]
        rho = 1.0 / (nn * (ahead - x[i]))
        out[i] = nonlin_eval(th_pack, rho) * drift_eval(dr_pack, t, x[i]) / gamma
    return out
