import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from degenftl.errors import ConfigError, DegenerateGap, InvalidDensity
from degenftl.model import (
    DriftField,
    LeaderTrajectory,
    NonlinearityProfile,
    ParticleSystemConfig,
    Profile1D,
    default_delta,
    density_of_gap,
    evaluate_nonlinearity,
    validate_config,
    well_prepared_velocities,
)

from conftest import make_config


def unit_config(positions, v0, rho_bar_zeta=1.0, rho_bar_theta=1.0):
    x = np.asarray(positions, float)
    n = x.size - 1
    th = NonlinearityProfile.power_law(1.0, rho_bar_theta)
    ze = NonlinearityProfile.power_law(1.0, rho_bar_zeta, role="alertness")
    return ParticleSystemConfig(n, 1.0, 1.0, 1.0, x, np.asarray(v0, float), th, ze,
                                DriftField.constant(1.0), LeaderTrajectory.constant_speed(x[-1], 1.0))


@pytest.mark.parametrize("gap,n,expected", [(0.5, 2, 1.0), (1.0, 1, 1.0), (0.001, 100, 10.0)])
def test_density_of_gap_examples(gap, n, expected):
    assert density_of_gap(gap, n) == pytest.approx(expected, rel=1e-15)


@pytest.mark.parametrize("gap", [0.0, -0.1])
def test_density_of_gap_rejects_nonpositive(gap):
    with pytest.raises(DegenerateGap):
        density_of_gap(gap, 3)


@pytest.mark.parametrize("alpha,rho,expected", [(1, 0.0, 1.0), (2, 1.0, 0.0), (2, 0.5, 0.25)])
def test_power_law_values(alpha, rho, expected):
    prof = NonlinearityProfile.power_law(alpha, 1.0)
    assert evaluate_nonlinearity(prof, rho) == pytest.approx(expected, abs=1e-15)


def test_negative_density_rejected():
    with pytest.raises(InvalidDensity):
        evaluate_nonlinearity(NonlinearityProfile.power_law(1, 1), -1e-3)


def test_power_law_rejects_small_exponent():
    with pytest.raises(ConfigError):
        NonlinearityProfile.power_law(0.5, 1.0)


def test_tabulated_profile_interpolates_and_vanishes():
    prof = NonlinearityProfile.tabulated([0.0, 0.4, 1.2], [1.0, 0.5, 0.0])
    assert prof(0.2) == pytest.approx(0.75)
    assert prof(1.2) == 0.0
    assert prof(5.0) == 0.0
    assert prof.rho_bar == 1.2


@pytest.mark.parametrize("bp,vals", [
    ([0.0, 0.5, 1.0], [1.0, 1.2, 0.0]),   # increasing
    ([0.0, 0.5, 1.0], [1.0, 0.0, 0.0]),   # zero before the threshold
    ([0.1, 0.5, 1.0], [1.0, 0.5, 0.0]),   # does not start at 0
    ([0.0, 0.5, 1.0], [1.0, 0.5, 0.1]),   # does not end at 0
])
def test_tabulated_profile_validation(bp, vals):
    with pytest.raises(ConfigError):
        NonlinearityProfile.tabulated(bp, vals)


profiles = st.one_of(
    st.builds(NonlinearityProfile.power_law, st.floats(1.0, 6.0), st.floats(0.1, 5.0)),
    st.lists(st.floats(0.05, 1.0), min_size=1, max_size=6).map(
        lambda ds: NonlinearityProfile.tabulated(
            np.concatenate([[0.0], np.cumsum(ds)]),
            np.concatenate([np.linspace(1.0, 0.1, len(ds)), [0.0]]))),
)


@settings(max_examples=60, deadline=None)
@given(profiles, st.floats(0.0, 10.0), st.floats(0.0, 10.0))
def test_nonlinearity_monotone_and_nonnegative(prof, a, b):
    lo, hi = sorted((a, b))
    assert prof(lo) >= prof(hi) >= 0.0


@settings(max_examples=60, deadline=None)
@given(profiles)
def test_nonlinearity_vanishes_exactly_from_threshold(prof):
    rb = prof.rho_bar
    grid = rb * np.array([0.0, 0.5, 0.999, 1 - 1e-9, 1.0, 1 + 1e-9, 2.0])
    vals = prof(grid)
    np.testing.assert_array_equal(vals == 0.0, grid >= rb)


def test_validate_uniform_saturated_example():
    vc = validate_config(unit_config([0.0, 0.5, 1.0], [0.0, 0.0]))
    assert vc.saturated == (0, 1)
    np.testing.assert_allclose(vc.rho0, [1.0, 1.0])
    np.testing.assert_array_equal(vc.vtilde, [0.0, 0.0])


def test_validate_rejects_density_above_threshold_with_index():
    with pytest.raises(ConfigError) as exc:
        validate_config(unit_config([0.0, 0.4, 1.0], [0.0, 0.0]))
    assert "index 0" in str(exc.value)
    assert "1.25" in str(exc.value)


def test_validate_unsaturated_example():
    vc = validate_config(unit_config(np.linspace(0, 8, 5), np.zeros(4), rho_bar_zeta=0.5))
    assert vc.saturated == ()
    np.testing.assert_allclose(vc.rho0, 0.125)


def test_validate_collects_every_error():
    cfg = unit_config([0.0, 2.0, 1.0, 3.0], [0.1, -1.0, 0.1])
    with pytest.raises(ConfigError) as exc:
        validate_config(cfg)
    assert any("index 1" in e for e in exc.value.errors)


def test_validate_rejects_negative_velocity_with_index():
    with pytest.raises(ConfigError) as exc:
        validate_config(unit_config(np.linspace(0, 8, 5), [0.1, 0.1, -0.5, 0.1], rho_bar_zeta=0.5))
    assert "index 2" in str(exc.value)


def test_validate_rejects_zeta_threshold_above_theta():
    with pytest.raises(ConfigError):
        validate_config(unit_config(np.linspace(0, 8, 5), np.zeros(4), rho_bar_zeta=2.0))


def test_validate_rejects_leader_mismatch():
    cfg = make_config(4).replace(leader=LeaderTrajectory.constant_speed(9.0, 1.0))
    with pytest.raises(ConfigError, match="leader"):
        validate_config(cfg)


def test_validate_rejects_nonpositive_drift():
    drift = DriftField.separable(Profile1D.constant(1.0), Profile1D.sine(0.0, 1.0, 1.0))
    with pytest.raises(ConfigError, match="drift"):
        validate_config(make_config(4, drift=drift))


def test_validate_rejects_understated_lipschitz():
    drift = DriftField.separable(Profile1D.constant(1.0), Profile1D.sine(1.0, 0.5, 2.0), lipschitz_x=0.1)
    with pytest.raises(ConfigError, match="Lipschitz"):
        validate_config(make_config(4, drift=drift))


def test_validate_is_idempotent():
    vc = validate_config(make_config(8))
    assert validate_config(vc) is vc


def test_saturated_index_starts_at_equilibrium():
    x = np.array([0.0, 0.5, 3.0])
    th = NonlinearityProfile.power_law(1.0, 1.5)
    ze = NonlinearityProfile.power_law(1.0, 0.9, role="alertness")
    cfg = ParticleSystemConfig(2, 1.0, 2.0, 1.0, x, np.array([0.0, 0.3]), th, ze,
                               DriftField.constant(3.0), LeaderTrajectory.constant_speed(3.0, 1.0))
    vc = validate_config(cfg)
    assert vc.saturated == (0,)
    assert vc.start_velocities[0] == pytest.approx(th(1.0) * 3.0 / 2.0)
    assert vc.vtilde[0] == 0.0
    vz = validate_config(cfg.replace(saturated_start="zero"))
    assert vz.start_velocities[0] == 0.0


def test_velocity_bound_combines_initial_and_equilibrium():
    vc = validate_config(make_config(8, v0=3.0))
    assert vc.velocity_bound == 3.0
    vc = validate_config(make_config(8, v0=0.0))
    fmax = vc.max_drift
    assert vc.velocity_bound == pytest.approx(fmax)


def test_default_delta():
    assert default_delta(10) == 1e-3
    assert default_delta(100) == 1e-4


def test_profile_bounds_are_exact():
    p = Profile1D.sine(1.0, 0.3, 2.0, 0.4)
    xs = np.linspace(-1.0, 3.0, 200001)
    lo, hi = p.bounds(-1.0, 3.0)
    assert lo == pytest.approx(np.min(p(xs)), abs=1e-9)
    assert hi == pytest.approx(np.max(p(xs)), abs=1e-9)
    assert lo <= np.min(p(xs)) and hi >= np.max(p(xs))


def test_drift_lipschitz_spot_check():
    rng = np.random.default_rng(0)
    for drift in (DriftField.separable(Profile1D.sine(1, 0.2, 3), Profile1D.sine(1, 0.25, 2.1)),
                  DriftField.tabulated([0, 1, 2], [0, 1, 2, 3], [[1, 2, 1, 1], [1, 1.5, 2, 1], [2, 2, 2, 2]])):
        t = rng.uniform(0, 2, 400)
        x, y = rng.uniform(-0.5, 3.5, (2, 400))
        lhs = np.abs(drift(t, x) - drift(t, y))
        assert np.all(lhs <= drift.lipschitz_x * np.abs(x - y) + 1e-12)


def test_tabulated_drift_lipschitz_is_max_slope():
    drift = DriftField.tabulated([0, 1], [0, 0.5, 2.0], [[1, 2, 2.3], [1, 1, 1]])
    assert drift.lipschitz_x == pytest.approx(2.0)


def test_tabulated_leader_is_c1_and_increasing():
    lead = LeaderTrajectory.tabulated([0, 0.5, 1.0, 2.0], [1.0, 1.4, 2.5, 3.0])
    t = np.linspace(0, 2, 2001)
    x = lead.position(t)
    assert np.all(np.diff(x) > 0)
    fd = np.gradient(x, t)
    np.testing.assert_allclose(lead.velocity(t[1:-1]), fd[1:-1], atol=5e-3)
    lo, hi = lead.speed_bounds(2.0)
    v = lead.velocity(t)
    assert lo <= v.min() + 1e-12 and hi >= v.max() - 1e-12


def test_well_prepared_velocities():
    x = np.array([0.0, 1.0, 3.0])
    th = NonlinearityProfile.power_law(1.0, 1.0)
    v = well_prepared_velocities(x, th, DriftField.constant(2.0), 4.0)
    np.testing.assert_allclose(v, [0.5 * 2 / 4, 0.75 * 2 / 4])
