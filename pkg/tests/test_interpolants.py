from types import SimpleNamespace

import numpy as np
import pytest

from degenftl.errors import DegenerateGap, SaturatedCellAtPositiveTime
from degenftl.interpolants import (
    build_fields,
    evaluate,
    initial_data,
    integral_per_time,
    l1_per_time,
    mass,
    mobility_ratio_field,
    norms_and_support,
)
from degenftl.micro_solver import solve_system
from degenftl.model import NonlinearityProfile

from conftest import make_config


def frozen(positions, velocities, times=(0.0,), theta=None):
    """Trajectory-like object with the same state at every time."""
    x = np.repeat(np.asarray(positions, float)[:, None], len(times), axis=1)
    v = np.repeat(np.asarray(velocities, float)[:, None], len(times), axis=1)
    cfg = SimpleNamespace(theta=theta or NonlinearityProfile.power_law(1.0, 2.0))
    return SimpleNamespace(times=np.asarray(times, float), positions=x, velocities=v, config=cfg)


def test_two_particle_worked_example():
    rho, e1, e2 = build_fields(frozen([0.0, 0.5, 1.5], [1.0, 2.0, 0.0]))
    np.testing.assert_allclose(rho.values[0], [1.0, 0.5])
    np.testing.assert_allclose(e1.values[0], [1.0, 1.0])
    # e2 on the first cell is 1 + 2x
    xs = np.array([0.0, 0.1, 0.25, 0.49])
    np.testing.assert_allclose(evaluate(e2, 0.0, xs), 1 + 2 * xs, rtol=1e-14)
    assert integral_per_time(rho)[0] == pytest.approx(1.0, abs=1e-15)


def test_cell_convention_left_closed_right_open():
    rho, _, _ = build_fields(frozen([0.0, 0.5, 1.5], [0.0, 0.0, 0.0]))
    assert evaluate(rho, 0.0, 0.5) == 0.5
    assert evaluate(rho, 0.0, 0.0) == 1.0
    assert evaluate(rho, 0.0, 1.5) == 0.0
    assert evaluate(rho, 0.0, -1e-9) == 0.0


def test_degenerate_gap_rejected():
    with pytest.raises(DegenerateGap):
        build_fields(frozen([0.0, 0.5, 0.5], [0.0, 0.0, 0.0]))


def test_mass_is_one_on_solver_output():
    traj = solve_system(make_config(33, 0.2, rng=np.random.default_rng(2)), 201)
    rho, _, _ = build_fields(traj)
    np.testing.assert_allclose(mass(rho), 1.0, atol=1e-12)


def test_l1_of_affine_field_with_sign_change():
    traj = frozen([0.0, 1.0, 2.0], [1.0, -1.0, 0.0])
    _, _, e2 = build_fields(traj)
    # first cell: rho = 1/2, v = 1 -> -1: 0.5 (1 - 2x) on [0, 1], |.| integrates to 1/4
    # second cell: rho v^2 = 1/2 with slope 1/2 towards v = 0: 0.5 (1 - u), integral 1/4
    assert l1_per_time(e2)[0] == pytest.approx(0.25 + 0.25, rel=1e-14)


def test_norms_and_support():
    traj = frozen([0.0, 0.5, 1.5], [1.0, 2.0, 0.0], times=(0.0, 1.0))
    rho, e1, e2 = build_fields(traj)
    out = norms_and_support(e2)
    assert out["sup"] == pytest.approx(2.0)   # right end of the first cell
    assert out["support"][0] == (0.0, 1.5)
    zero = norms_and_support(build_fields(frozen([0.0, 1.0], [0.0, 0.0]))[1])
    assert zero["support"] == [None] and zero["sup"] == 0.0


def test_mobility_ratio_single_cell():
    th = NonlinearityProfile.power_law(1.0, 2.0)
    traj = frozen([0.0, 2.0], [0.5, 1.0], times=(0.0, 1.0), theta=th)
    fld, total = mobility_ratio_field(traj)
    # rho = 1/2, theta = 3/4, ratio = (1/2)(1/2)/(3/4) = 1/3 over width 2 and unit time
    np.testing.assert_allclose(fld.values, 1.0 / 3.0)
    assert total == pytest.approx(2.0 / 3.0, rel=1e-14)


def test_mobility_ratio_excludes_initial_saturated_cells():
    th = NonlinearityProfile.power_law(1.0, 1.0)
    x = np.array([[0.0, 0.0], [1.0, 1.5], [3.0, 3.5]])
    v = np.zeros((3, 2))
    traj = SimpleNamespace(times=np.array([0.0, 1.0]), positions=x, velocities=v,
                           config=SimpleNamespace(theta=th))
    fld, _ = mobility_ratio_field(traj)
    assert fld.meta["excluded_initial_cells"] == 0
    x2 = np.array([[0.0, 0.0], [0.5, 1.5], [3.0, 3.5]])
    traj2 = SimpleNamespace(times=np.array([0.0, 1.0]), positions=x2, velocities=v,
                            config=SimpleNamespace(theta=th))
    fld2, _ = mobility_ratio_field(traj2)
    assert fld2.meta["excluded_initial_cells"] == 1
    assert fld2.values[0, 0] == 0.0


def test_mobility_ratio_rejects_saturation_at_positive_time():
    th = NonlinearityProfile.power_law(1.0, 1.0)
    x = np.array([[0.0, 1.0], [1.0, 1.5], [3.0, 3.5]])
    traj = SimpleNamespace(times=np.array([0.0, 1.0]), positions=x, velocities=np.zeros((3, 2)),
                           config=SimpleNamespace(theta=th))
    with pytest.raises(SaturatedCellAtPositiveTime) as exc:
        mobility_ratio_field(traj)
    assert exc.value.index == 0


def test_bound_chain_on_solver_output():
    cfg = make_config(24, 0.3, v0=0.6, rng=np.random.default_rng(9))
    traj = solve_system(cfg, 101)
    rho, e1, e2 = build_fields(traj)
    vc = traj.config
    V = vc.velocity_bound
    assert np.max(rho.values) < vc.theta.rho_bar
    assert np.all(e1.values <= V * rho.values + 1e-12)
    assert np.all(e2.values <= V * e1.values + 1e-12)
    assert np.all(e2.right_values() <= V * V * rho.values + 1e-12)
    s1 = norms_and_support(e1)["support"]
    s0 = norms_and_support(rho)["support"]
    for a, b in zip(s1, s0):
        assert a is None or (a[0] >= b[0] and a[1] <= b[1])


def test_initial_data_check():
    traj = solve_system(make_config(8), 11)
    init = initial_data(build_fields(traj))
    vc = traj.config
    assert init.check(vc.theta.rho_bar, vc.s, vc.S) == []
    assert init.check(0.01, vc.s, vc.S)
    assert init.rho0.times.size == 1
