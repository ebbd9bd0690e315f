import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from sim2road.geometry import CameraModel, GroundPlane
from sim2road.synth import make_camera

settings.register_profile("default", max_examples=200, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ACCEPTANCE_LINES = []


def record_criterion(number, passed, detail):
    """Print and remember one acceptance line; the summary hook repeats them at the end."""
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)


@pytest.fixture
def simple_camera():
    """fx = fy = 1000, principal point (960, 540), identity extrinsics."""
    K = np.array([[1000.0, 0.0, 960.0], [0.0, 1000.0, 540.0], [0.0, 0.0, 1.0]])
    return CameraModel(K, np.eye(4))


@pytest.fixture
def roadside_camera():
    return make_camera(8.0, 0.15, 0.0)


@pytest.fixture
def flat_plane():
    return GroundPlane.flat()
