import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from fpconn import build_phantom, build_steered_grids, calibrate_A, generate_directions, speed_from_peaks  # noqa: E402
from fpconn.operator import assemble_H  # noqa: E402

ACCEPTANCE_LINES = []


def record(criterion, passed, detail):
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {criterion:>2}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def dirs128():
    return generate_directions(128)


@pytest.fixture(scope="session")
def A128(dirs128):
    return calibrate_A(dirs128, np.pi / 12)


@pytest.fixture(scope="session")
def phantom():
    return build_phantom()


@pytest.fixture(scope="session")
def phantom_speed(phantom, dirs128):
    mask, peaks, _ = phantom
    return speed_from_peaks(peaks, build_steered_grids(mask, dirs128))


@pytest.fixture(scope="session")
def phantom_op(phantom_speed, A128):
    return assemble_H(phantom_speed, A=A128)


@pytest.fixture(scope="session")
def small_family():
    """Tiny 5x4x3 box with N=16 directions and a single oblique peak."""
    from fpconn.domain import Mask, PeakField

    dims = (5, 4, 3)
    d = np.array([1.0, 0.4, 0.2])
    d /= np.linalg.norm(d)
    peaks = PeakField(np.broadcast_to(d, dims + (1, 3)).copy())
    dirs = generate_directions(16)
    grids = build_steered_grids(Mask(np.ones(dims)), dirs)
    return dirs, peaks, speed_from_peaks(peaks, grids, exponent=2)
