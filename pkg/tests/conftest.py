import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from levy_rds import LevyTriplet, UniformBall, sample_path

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile("default")


@pytest.fixture(scope="session")
def jump_triplet():
    return LevyTriplet(1, np.array([0.1]), np.array([[0.4]]), 2.0, UniformBall(0.4, 1))


@pytest.fixture(scope="session")
def jump_path(jump_triplet):
    return sample_path(jump_triplet, (-23.0, 3.0), 1e-3, 11)


@pytest.fixture(scope="session")
def drift_path():
    tri = LevyTriplet(1, np.array([1.0]), np.zeros((1, 1)))
    return sample_path(tri, (-23.0, 3.0), 1e-3, 0)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
