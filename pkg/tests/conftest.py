import numpy as np
import pytest

from s2no.geometry import MeshSpec, generate_mesh


@pytest.fixture(scope="session")
def small_plate():
    """8x4 voxel plate on a 9x5 grid: 90 points, fast enough for oracle solves."""
    return generate_mesh(MeshSpec(dims=(8.0, 4.0), resolution=(9, 5), voxels=(4, 2),
                                  geometry_id="small-plate"))


@pytest.fixture(scope="session")
def tiny_plate():
    """24-point plate used by the gradient check."""
    return generate_mesh(MeshSpec(dims=(6.0, 3.0), resolution=(4, 3), voxels=(2, 1),
                                  geometry_id="tiny-plate"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERIA: list[str] = []


@pytest.fixture(scope="session")
def criteria_log():
    return _CRITERIA


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)
