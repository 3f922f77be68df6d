import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from inrpcc.cloud import VoxelPointCloud  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_cloud(rng, n, resolution_bits=6, colored=True):
    side = 1 << resolution_bits
    pts = rng.integers(0, side, size=(n, 3))
    cols = rng.integers(0, 256, size=(n, 3)) / 255.0 if colored else None
    return VoxelPointCloud.from_points(pts, resolution_bits, cols)


@pytest.fixture
def small_cloud(rng):
    return random_cloud(rng, 200)


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
