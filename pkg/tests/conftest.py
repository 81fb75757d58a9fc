import numpy as np
import pytest

from degenftl.model import (
    DriftField,
    LeaderTrajectory,
    NonlinearityProfile,
    ParticleSystemConfig,
    Profile1D,
    well_prepared_velocities,
)

TWO_PI_THIRDS = 2 * np.pi / 3


def jittered_positions(n, length, rng=None, jitter=0.3):
    """Roughly uniform positions on [0, length] with relative jitter per gap."""
    x = np.linspace(0.0, length, n + 1)
    if rng is not None and n > 1:
        h = length / n
        x[1:-1] += rng.uniform(-jitter * h / 2, jitter * h / 2, n - 1)
    return x


def make_config(n=16, eps=1.0, *, gamma=1.0, horizon=1.5, length=2.5, v0=0.2, theta=None,
                zeta=None, drift=None, leader_speed=1.0, delta=None, rng=None, jitter=0.3):
    theta = theta or NonlinearityProfile.power_law(2.0, 1.0)
    zeta = zeta or NonlinearityProfile.power_law(2.0, 1.0, role="alertness")
    drift = drift or DriftField.separable(Profile1D.sine(1.0, 0.2, 3.0),
                                          Profile1D.sine(1.0, 0.25, TWO_PI_THIRDS))
    x = jittered_positions(n, length, rng, jitter)
    if isinstance(v0, str):
        v = well_prepared_velocities(x, theta, drift, gamma)
    else:
        v = np.full(n, float(v0))
    return ParticleSystemConfig(n, eps, gamma, horizon, x, v, theta, zeta, drift,
                                LeaderTrajectory.constant_speed(x[-1], leader_speed), delta)


@pytest.fixture
def config_factory():
    return make_config


# one line per acceptance criterion, collected by test_acceptance and printed
# at the end of the session
CRITERIA = {}


def record_criterion(number, passed, detail):
    CRITERIA[number] = (bool(passed), detail)
    print(f"criterion {number:2d} {'PASS' if passed else 'FAIL'}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        passed, detail = CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d} {'PASS' if passed else 'FAIL'}: {detail}")
