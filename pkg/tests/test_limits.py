import numpy as np
import pytest

from degenftl.errors import ConfigError, ConfigMismatch
from degenftl.limits import (
    DensityProfile,
    EpsilonRule,
    SweepPlan,
    build_config,
    first_monotone_index,
    first_order_reference,
    inertia_gap,
    run_sweep,
    validate_plan,
)
from degenftl.micro_solver import solve_system
from degenftl.model import DriftField, NonlinearityProfile, Profile1D, validate_config

from conftest import make_config
from oracles import rk4_first_order


def small_plan(**kw):
    base = dict(
        ns=(8, 16, 32),
        epsilon=EpsilonRule.fixed(0.5),
        density=DensityProfile([0.0, 0.5, 1.5, 2.5], [0.2, 0.5, 0.5, 0.2]),
        theta=NonlinearityProfile.power_law(2.0, 1.0),
        drift=DriftField.separable(Profile1D.constant(1.0), Profile1D.sine(1.0, 0.25, 2 * np.pi / 3)),
        horizon=0.5,
        grid=65,
        phi="flat,bump_wide,wave_sin2",
    )
    base.update(kw)
    return SweepPlan(**base)


# ------------------------------------------------------------------ density

def test_density_normalized_to_unit_mass():
    d = DensityProfile([0.0, 1.0, 3.0], [2.0, 2.0, 0.0])
    xs = np.linspace(0, 3, 300001)
    assert np.trapezoid(d(xs), xs) == pytest.approx(1.0, rel=1e-9)
    assert d(-0.5) == 0.0 and d(3.5) == 0.0


def test_placement_cells_carry_equal_mass():
    d = DensityProfile([0.0, 0.5, 1.5, 2.5], [0.2, 0.5, 0.5, 0.2])
    for n in (7, 50, 800):
        x = d.placement(n)
        assert x[0] == 0.0 and x[-1] == 2.5
        assert np.all(np.diff(x) > 0)
        # exact mass of each cell from the piecewise-linear density
        fine = np.unique(np.concatenate([x, d.breakpoints]))
        seg = 0.5 * (d(fine[1:]) + d(fine[:-1])) * np.diff(fine)
        cum = np.concatenate([[0.0], np.cumsum(seg)])
        masses = np.diff(np.interp(x, fine, cum))
        np.testing.assert_allclose(masses, 1.0 / n, rtol=1e-9)
        # discrete density never exceeds the profile maximum
        assert np.max(1.0 / (n * np.diff(x))) <= d.sup * (1 + 1e-9)


def test_quantiles_of_uniform_density():
    d = DensityProfile.uniform(1.0, 3.0)
    np.testing.assert_allclose(d.quantiles([0.0, 0.25, 1.0]), [1.0, 1.5, 3.0])


@pytest.mark.parametrize("bp,vals", [
    ([0.0, 1.0], [1.0]),
    ([0.0, 0.0, 1.0], [1.0, 1.0, 1.0]),
    ([0.0, 1.0, 2.0], [1.0, -1.0, 1.0]),
    ([0.0, 1.0, 2.0, 3.0], [1.0, 0.0, 0.0, 1.0]),
])
def test_density_validation(bp, vals):
    with pytest.raises(ConfigError):
        DensityProfile(bp, vals)


# -------------------------------------------------------------------- plans

def test_epsilon_rules():
    assert EpsilonRule.fixed(0.3)(800) == 0.3
    assert EpsilonRule.vanishing()(50) == pytest.approx(0.02)
    assert EpsilonRule.vanishing(2.0, 0.5)(16) == pytest.approx(0.5)
    with pytest.raises(ConfigError):
        EpsilonRule("sometimes", 1.0)
    with pytest.raises(ConfigError):
        EpsilonRule.fixed(0.0)


def test_validate_plan_constants():
    c = validate_plan(small_plan())
    assert c["s"] == 0.0 and c["S"] == pytest.approx(3.0)
    assert c["velocity_bound"] == pytest.approx(1.25)


@pytest.mark.parametrize("change,needle", [
    (dict(ns=(8,)), "at least two"),
    (dict(ns=(8, 16, 8)), "increasing"),
    (dict(ns=(8, 16, 40)), "geometric"),
    (dict(grid=2), "grid"),
    (dict(theta=NonlinearityProfile.power_law(2.0, 0.3)), "threshold"),
])
def test_validate_plan_errors(change, needle):
    with pytest.raises(ConfigError) as exc:
        validate_plan(small_plan(**change))
    assert needle in str(exc.value)


def test_validate_plan_prefixes_failing_n():
    plan = small_plan(velocities=Profile1D.constant(-1.0))
    with pytest.raises(ConfigError) as exc:
        validate_plan(plan)
    assert all(e.startswith("N=8:") for e in exc.value.errors)


def test_build_config_uses_theta_for_alertness():
    cfg = build_config(small_plan(), 16)
    assert cfg.zeta.role == "alertness"
    assert cfg.zeta(0.4) == cfg.theta(0.4)
    assert cfg.epsilon == 0.5


def test_mode_and_rule_must_agree():
    with pytest.raises(ConfigError):
        run_sweep(small_plan(), "vanishing_inertia")
    with pytest.raises(ConfigError):
        run_sweep(small_plan(), "sideways")


def test_first_monotone_index():
    assert first_monotone_index([3.0, 2.0, 1.0]) == 0
    assert first_monotone_index([1.0, 2.0, 1.0, 0.5]) == 1
    assert first_monotone_index([1.0, 2.0]) == 1


# -------------------------------------------------------------------- sweeps

@pytest.fixture(scope="module")
def sweep_small():
    return run_sweep(small_plan(), "many_particle")


def test_sweep_shape_and_invariants(sweep_small):
    rep = sweep_small
    assert rep.ns == [8, 16, 32]
    assert len(rep.rows) == 3 * 3
    assert rep.phi_ids == ["flat", "bump_wide", "wave_sin2"]
    for e in rep.entries:
        assert all(e.invariants.values())
        assert all(r.identities_ok and r.bounds_ok for r in e.reports)
        assert e.constants["C_R"] == rep.entries[0].constants["C_R"]
    assert rep.series("flat", "cauchy_diff")[0] is None
    assert rep.series("flat", "pairing_rho") == pytest.approx([0.25] * 3, rel=1e-10)
    assert "mode: many_particle" in rep.summary()


def test_sweep_with_workers_is_identical(sweep_small):
    rep2 = run_sweep(small_plan(), "many_particle", workers=2)
    for a, b in zip(sweep_small.rows, rep2.rows):
        assert a == b


def test_vanishing_sweep_rows_carry_mobility_gap():
    rep = run_sweep(small_plan(epsilon=EpsilonRule.vanishing()), "vanishing_inertia")
    assert [e.eps for e in rep.entries] == [1 / 8, 1 / 16, 1 / 32]
    assert all(r.g_gap is not None and r.g_gap >= 0 for r in rep.rows)
    for e in rep.entries:
        for pid, bound in e.eps_block_bound.items():
            row = [r for r in rep.rows if r.N == e.n and r.phi_id == pid][0]
            assert row.eps_block_bound == bound
            assert row.eps_block <= bound * e.eps


# -------------------------------------------------------------- first order

def test_first_order_free_flow_is_exact():
    # huge gaps: theta is 1 to within 1e-9 and F = 1, so x_i(t) = x_i(0) + t
    n = 4
    x = np.arange(n + 1) * 1e9
    from degenftl.model import LeaderTrajectory, ParticleSystemConfig
    cfg = ParticleSystemConfig(n, 1.0, 1.0, 1.0, x, np.zeros(n), NonlinearityProfile.power_law(1.0, 1.0),
                               NonlinearityProfile.power_law(1.0, 1.0, role="alertness"),
                               DriftField.constant(1.0), LeaderTrajectory.constant_speed(x[-1], 1.0))
    ref = first_order_reference(cfg, 11)
    np.testing.assert_allclose(ref.positions - x[:, None], np.broadcast_to(ref.times, (n + 1, 11)),
                               atol=1e-6)
    assert ref.stats["model"] == "first_order"


def test_first_order_matches_rk4_oracle():
    cfg = make_config(8, 1.0, rng=np.random.default_rng(8))
    ref = first_order_reference(cfg, 16)
    X = rk4_first_order(cfg, ref.times, substeps=400)
    np.testing.assert_allclose(ref.positions[:-1], X, rtol=1e-6, atol=1e-9)


def test_first_order_congested_block_stays_ordered():
    # a dense block behind a slow leader keeps every gap above 1/(N rho_bar)
    cfg = make_config(16, 1.0, length=1.2, leader_speed=0.05, horizon=2.0)
    ref = first_order_reference(cfg, 101)
    vc = ref.config
    assert np.min(np.diff(ref.positions, axis=0)) >= vc.gap_min
    assert np.all(np.diff(ref.positions, axis=1) >= -1e-12)


def test_inertia_gap_rejects_mismatch():
    cfg = make_config(8, 0.1, v0="well_prepared")
    sec = solve_system(cfg, 51)
    first = first_order_reference(cfg, 51)
    with pytest.raises(ConfigMismatch):
        inertia_gap(first, first)
    with pytest.raises(ConfigMismatch):
        inertia_gap(sec, first_order_reference(cfg, 41))
    with pytest.raises(ConfigMismatch):
        inertia_gap(sec, first_order_reference(cfg.replace(gamma=2.0), 51))
    other = make_config(8, 0.1, v0="well_prepared", rng=np.random.default_rng(1))
    with pytest.raises(ConfigMismatch):
        inertia_gap(sec, first_order_reference(other, 51))


def test_inertia_gap_shrinks_with_epsilon():
    base = make_config(8, 1.0, v0="well_prepared", rng=np.random.default_rng(6))
    first = first_order_reference(base, 101)
    gaps = [inertia_gap(solve_system(base.replace(epsilon=e), 101), first, ()).sup_gap
            for e in (1e-1, 1e-2, 1e-3)]
    assert gaps[0] > gaps[1] > gaps[2]
    assert gaps[2] < 1e-3


def test_inertia_gap_pairings():
    base = make_config(8, 1e-3, v0="well_prepared")
    first = first_order_reference(base, 101)
    res = inertia_gap(solve_system(base, 101), first)
    assert set(res.pairing_gaps) >= {"flat", "bump_mid"}
    assert res.pairing_gaps["flat"]["rho"] < 1e-10
    assert all(v["e1"] < 1e-2 for v in res.pairing_gaps.values())


def test_validated_config_accepted_by_reference():
    vc = validate_config(make_config(4))
    assert first_order_reference(vc, 5).positions.shape == (5, 5)
