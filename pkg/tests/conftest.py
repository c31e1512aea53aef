from pathlib import Path

import numpy as np
import pytest

from sfdiff.room_acoustics import Grid, RoomSpec

GOLDEN = Path(__file__).parent / "golden"

FIG2_ROOM = RoomSpec(3.7, 7.0, 26.1, 0.6, (0.9, 0.3, 2.4))
FIG2_Z_O = 1.25
FIG2_FREQ = 98.0


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def small_room():
    return RoomSpec(4.0, 3.0, 2.7, 0.6, (1.1, 0.7, 1.3))


@pytest.fixture
def small_grid(small_room):
    return Grid(small_room, 1.2)


@pytest.fixture
def fig2_grid():
    return Grid(FIG2_ROOM, FIG2_Z_O)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("tests.test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
