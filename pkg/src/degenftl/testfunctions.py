"""Closed-form test functions with analytic derivatives.

Every catalog entry is a product ``a(t) b(x)`` built on a reference box
``[0, T] x [lo, hi]`` and vanishes identically at ``t = T``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

CATALOG_VERSION = "1"


@dataclass(frozen=True, eq=False)
class TestFunction:
    """``phi(t, x)`` with analytic ``phi_t``, ``phi_x`` and ``phi_xx``.

    All callables take broadcastable numpy arrays. ``terminal`` marks functions
    with ``phi(T, .) = 0``.
    """

    __test__ = False  # not a pytest class

    id: str
    phi: Callable
    phi_t: Callable
    phi_x: Callable
    phi_xx: Callable
    terminal: bool = True
    description: str = ""
    kinks: tuple = ()  # x positions where smoothness drops (cells are split there)

    def sup_norms(self, horizon, lo, hi, nt=257, nx=4097):
        """Sup norms of the function and its derivatives over ``[0,T] x [lo,hi]``,
        evaluated on a fixed tensor grid."""
        t = np.linspace(0.0, horizon, nt)[:, None]
        x = np.linspace(lo, hi, nx)[None, :]
        return {name: float(np.max(np.abs(getattr(self, name)(t, x))))
                for name in ("phi", "phi_t", "phi_x", "phi_xx")}


def _product(id_, a, da, b, db, ddb, description, kinks=()):
    return TestFunction(
        id_,
        lambda t, x: a(t) * b(x),
        lambda t, x: da(t) * b(x),
        lambda t, x: a(t) * db(x),
        lambda t, x: a(t) * ddb(x),
        True,
        description,
        tuple(sorted(kinks)),
    )


def _zeros(x):
    return np.zeros_like(np.asarray(x, dtype=float))


def _bump(c, w):
    """``(1 - z^2)^6`` on ``|z| < 1`` with ``z = (x - c) / w``; C^5 overall."""

    def parts(x):
        z = (np.asarray(x, dtype=float) - c) / w
        q = np.clip(1.0 - z * z, 0.0, None)
        return z, q

    def b(x):
        z, q = parts(x)
        return q ** 6

    def db(x):
        z, q = parts(x)
        return -12.0 * z * q ** 5 / w

    def ddb(x):
        z, q = parts(x)
        return q ** 4 * (132.0 * z * z - 12.0) / (w * w)

    return b, db, ddb


def catalog(horizon, lo, hi):
    """The eight built-in test functions on ``[0, horizon] x [lo, hi]``."""
    T = float(horizon)
    L = float(hi - lo)
    if not (T > 0 and L > 0):
        raise ValueError("need horizon > 0 and hi > lo")

    def ramp(t):
        return 1.0 - np.asarray(t, dtype=float) / T

    def dramp(t):
        return np.full_like(np.asarray(t, dtype=float), -1.0 / T)

    def ramp2(t):
        return ramp(t) ** 2

    def dramp2(t):
        return -2.0 * ramp(t) / T

    def quarter(t):
        return np.sin(0.5 * math.pi * ramp(t))

    def dquarter(t):
        return -0.5 * math.pi / T * np.cos(0.5 * math.pi * ramp(t))

    def one(x):
        return np.ones_like(np.asarray(x, dtype=float))

    def lin(x):
        return (np.asarray(x, dtype=float) - lo) / L

    def dlin(x):
        return np.full_like(np.asarray(x, dtype=float), 1.0 / L)

    def wave(k, phase, fn):
        om = k * math.pi / L
        if fn == "sin":
            return (lambda x: np.sin(om * (np.asarray(x, dtype=float) - lo) + phase),
                    lambda x: om * np.cos(om * (np.asarray(x, dtype=float) - lo) + phase),
                    lambda x: -om * om * np.sin(om * (np.asarray(x, dtype=float) - lo) + phase))
        return (lambda x: np.cos(om * (np.asarray(x, dtype=float) - lo) + phase),
                lambda x: -om * np.sin(om * (np.asarray(x, dtype=float) - lo) + phase),
                lambda x: -om * om * np.cos(om * (np.asarray(x, dtype=float) - lo) + phase))

    out = [
        _product("flat", ramp, dramp, one, _zeros, _zeros, "1 - t/T"),
        _product("linear", ramp, dramp, lin, dlin, _zeros, "(1 - t/T) (x - lo)/L"),
    ]
    for name, cf, wf in (("bump_wide", 0.5, 0.6), ("bump_mid", 0.35, 0.25), ("bump_narrow", 0.65, 0.1)):
        c, w = lo + cf * L, wf * L
        b, db, ddb = _bump(c, w)
        out.append(_product(name, ramp2, dramp2, b, db, ddb,
                            f"(1 - t/T)^2 bump centred at lo + {cf} L, half-width {wf} L",
                            kinks=(c - w, c + w)))
    out.append(_product("wave_sin2", quarter, dquarter, *wave(2, 0.0, "sin"),
                        "sin(pi/2 (1 - t/T)) sin(2 pi (x - lo)/L)"))
    out.append(_product("ramp_cos3", ramp, dramp, *wave(3, 0.0, "cos"),
                        "(1 - t/T) cos(3 pi (x - lo)/L)"))
    out.append(_product("wave_sin4", ramp2, dramp2, *wave(4, 0.5, "sin"),
                        "(1 - t/T)^2 sin(4 pi (x - lo)/L + 0.5)"))
    return out


CATALOG_IDS = ("flat", "linear", "bump_wide", "bump_mid", "bump_narrow",
               "wave_sin2", "ramp_cos3", "wave_sin4")


def select(functions, selection):
    """Pick catalog entries by id. ``selection`` is ``"all"``, a comma list or
    an iterable of ids; an empty selection raises ValueError."""
    if isinstance(selection, str):
        selection = list(functions_ids(functions)) if selection.strip() == "all" else \
            [s.strip() for s in selection.split(",") if s.strip()]
    selection = list(selection)
    if not selection:
        raise ValueError("empty test-function selection")
    by_id = {f.id: f for f in functions}
    unknown = [s for s in selection if s not in by_id]
    if unknown:
        raise ValueError(f"unknown test function(s): {', '.join(unknown)}")
    return [by_id[s] for s in selection]


def functions_ids(functions):
    return tuple(f.id for f in functions)


def product_function(id_, time_factor, dtime_factor, space_factor, dspace, ddspace,
                     terminal=True, kinks=()):
    """Extension point: a user-supplied separable test function."""
    tf = _product(id_, time_factor, dtime_factor, space_factor, dspace, ddspace,
                  "user supplied", kinks)
    return TestFunction(tf.id, tf.phi, tf.phi_t, tf.phi_x, tf.phi_xx, terminal,
                        tf.description, tf.kinks)
