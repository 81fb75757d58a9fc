import numpy as np
import pytest

from degenftl.cli import default_plan_path, demo_config_path
from degenftl.config_io import key_lines, load_config, load_plan
from degenftl.errors import ConfigError, ConfigParseError
from degenftl.model import validate_config

RUN = """\
epsilon = 0.1
gamma = 1.0
horizon = 1.0

[initial]
positions = [0.0, 1.0, 2.0, 3.0]
velocities = [0.1, 0.2, 0.3]

[theta]
kind = "power_law"
alpha = 1.0
rho_bar = 1.0

[drift]
kind = "constant"
value = 1.0

[leader]
kind = "constant_speed"
speed = 1.0
"""


def write(tmp_path, text, name="cfg.toml"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_minimal_run_config(tmp_path):
    cfg = load_config(write(tmp_path, RUN))
    assert cfg.n_particles == 3
    np.testing.assert_array_equal(cfg.initial_velocities, [0.1, 0.2, 0.3])
    assert cfg.zeta.role == "alertness" and cfg.zeta(0.5) == cfg.theta(0.5)
    assert cfg.leader.position(0.0) == 3.0
    validate_config(cfg)


def test_demo_config_and_default_plan_load():
    cfg = load_config(demo_config_path())
    assert cfg.n_particles == 16 and cfg.epsilon == 0.05
    assert cfg.zeta.rho_bar == 0.8
    plan = load_plan(default_plan_path(), "many_particle")
    assert plan.ns == (50, 100, 200, 400, 800)
    assert plan.epsilon.kind == "fixed" and plan.epsilon.value == 1.0
    van = load_plan(default_plan_path(), "vanishing_inertia")
    assert van.epsilon_for(50) == pytest.approx(0.02)


def test_well_prepared_and_scalar_velocities(tmp_path):
    cfg = load_config(write(tmp_path, RUN.replace("velocities = [0.1, 0.2, 0.3]",
                                                  'velocities = "well_prepared"')))
    np.testing.assert_allclose(cfg.initial_velocities, [2.0 / 3.0] * 3)
    cfg = load_config(write(tmp_path, RUN.replace("velocities = [0.1, 0.2, 0.3]", "velocities = 0.5")))
    np.testing.assert_array_equal(cfg.initial_velocities, [0.5] * 3)


def test_density_placement(tmp_path):
    text = RUN.replace("positions = [0.0, 1.0, 2.0, 3.0]",
                       "density = { breakpoints = [0.0, 4.0], values = [1.0, 1.0] }")
    text = "n_particles = 4\n" + text.replace("velocities = [0.1, 0.2, 0.3]", "velocities = 0.0")
    cfg = load_config(write(tmp_path, text))
    np.testing.assert_allclose(cfg.initial_positions, [0, 1, 2, 3, 4])


def test_wrong_type_reports_line_and_field(tmp_path):
    p = write(tmp_path, RUN.replace("epsilon = 0.1", 'epsilon = "small"'))
    with pytest.raises(ConfigParseError) as exc:
        load_config(p)
    assert f"{p}:1:" in str(exc.value)
    assert exc.value.field == "epsilon"


def test_missing_table_is_reported(tmp_path):
    text = RUN.split("[theta]")[0] + RUN.split("rho_bar = 1.0\n")[1]
    with pytest.raises(ConfigParseError, match="theta"):
        load_config(write(tmp_path, text))


def test_velocity_length_mismatch(tmp_path):
    with pytest.raises(ConfigError, match="velocities"):
        load_config(write(tmp_path, RUN.replace("[0.1, 0.2, 0.3]", "[0.1, 0.2]")))


def test_malformed_toml(tmp_path):
    with pytest.raises(ConfigParseError):
        load_config(write(tmp_path, "epsilon = = 1\n"))


def test_unreadable_file(tmp_path):
    with pytest.raises(ConfigParseError, match="cannot read"):
        load_config(tmp_path / "nope.toml")


def test_plan_rejects_zeta_table(tmp_path):
    text = default_plan_path().read_text() + '\n[zeta]\nkind = "power_law"\nalpha = 1.0\nrho_bar = 0.5\n'
    with pytest.raises(ConfigParseError, match="zeta"):
        load_plan(write(tmp_path, text), "many_particle")


def test_key_lines():
    lines = key_lines(RUN)
    assert lines["epsilon"] == 1
    assert lines["theta.alpha"] == 11
    assert lines["initial.velocities"] == 7
