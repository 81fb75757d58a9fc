"""Independent reference computations used only by the tests.

Nothing here imports the solver kernels: the brute-force integrators below
re-evaluate the model right-hand side directly from the profile objects with
plain numpy.
"""

import numpy as np


def _rhs_second_order(t, x, v, cfg, delta, leader_x):
    n = cfg.n_particles
    ahead = np.append(x[1:], leader_x)
    rho = 1.0 / (n * (ahead - x))
    th = np.asarray(cfg.theta(rho))
    ze = np.asarray(cfg.zeta(rho))
    f = np.asarray(cfg.drift(t, x))
    acc = (th * f - cfg.gamma * v) / (cfg.epsilon * (ze + delta))
    return v, acc


def rk4_second_order(cfg, v0, times, substeps=200, delta=None):
    """Classical fixed-step RK4 on the full regularized system.

    ``times`` are the output instants; each output interval is split into
    ``substeps`` equal steps. Returns (positions (N, M), velocities (N, M)).
    """
    if delta is None:
        delta = cfg.effective_delta
    x = np.array(cfg.initial_positions[:-1], dtype=float)
    v = np.array(v0, dtype=float)
    lead = cfg.leader
    X = [x.copy()]
    V = [v.copy()]
    for k in range(len(times) - 1):
        t0, t1 = times[k], times[k + 1]
        h = (t1 - t0) / substeps
        t = t0
        for _ in range(substeps):
            lx0 = lead.position(t)
            lxm = lead.position(t + h / 2)
            lx1 = lead.position(t + h)
            k1x, k1v = _rhs_second_order(t, x, v, cfg, delta, lx0)
            k2x, k2v = _rhs_second_order(t + h / 2, x + h / 2 * k1x, v + h / 2 * k1v, cfg, delta, lxm)
            k3x, k3v = _rhs_second_order(t + h / 2, x + h / 2 * k2x, v + h / 2 * k2v, cfg, delta, lxm)
            k4x, k4v = _rhs_second_order(t + h, x + h * k3x, v + h * k3v, cfg, delta, lx1)
            x = x + h / 6 * (k1x + 2 * k2x + 2 * k3x + k4x)
            v = v + h / 6 * (k1v + 2 * k2v + 2 * k3v + k4v)
            t += h
        X.append(x.copy())
        V.append(v.copy())
    return np.array(X).T, np.array(V).T


def rk4_first_order(cfg, times, substeps=200):
    """Classical fixed-step RK4 on ``gamma x_i' = theta(rho_i) F(t, x_i)``."""
    n = cfg.n_particles
    lead = cfg.leader

    def rhs(t, x, lx):
        ahead = np.append(x[1:], lx)
        rho = 1.0 / (n * (ahead - x))
        return np.asarray(cfg.theta(rho)) * np.asarray(cfg.drift(t, x)) / cfg.gamma

    x = np.array(cfg.initial_positions[:-1], dtype=float)
    X = [x.copy()]
    for k in range(len(times) - 1):
        t0, t1 = times[k], times[k + 1]
        h = (t1 - t0) / substeps
        t = t0
        for _ in range(substeps):
            k1 = rhs(t, x, lead.position(t))
            k2 = rhs(t + h / 2, x + h / 2 * k1, lead.position(t + h / 2))
            k3 = rhs(t + h / 2, x + h / 2 * k2, lead.position(t + h / 2))
            k4 = rhs(t + h, x + h * k3, lead.position(t + h))
            x = x + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            t += h
        X.append(x.copy())
    return np.array(X).T


def fd_derivative(f, x, h=1e-5):
    """Fourth-order central difference."""
    return (-f(x + 2 * h) + 8 * f(x + h) - 8 * f(x - h) + f(x - 2 * h)) / (12 * h)
