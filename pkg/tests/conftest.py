import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ppskit.model import ObjectSegment, PartSegment, SegmentSet  # noqa: E402
from ppskit.taxonomy import bundled_taxonomy, make_taxonomy  # noqa: E402

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def cityscapes():
    return bundled_taxonomy("cityscapes_pp")


@pytest.fixture(scope="session")
def pascal():
    return bundled_taxonomy("pascal_pp")


@pytest.fixture(scope="session")
def toy():
    """Stuff classes 0, 1; thing 2 with parts [1, 2]; thing 3 with parts [3]; thing 4 without parts."""
    return make_taxonomy(things=[[1, 2], [3], []], stuff=2, name="toy")


def box(shape, y0, y1, x0, x1):
    m = np.zeros(shape, dtype=bool)
    m[y0:y1, x0:x1] = True
    return m


def obj(cls, inst, mask, parts=()):
    return ObjectSegment(cls, inst, mask, tuple(PartSegment(k, m) for k, m in parts))


def scene(shape, *segments):
    return SegmentSet(shape[0], shape[1], tuple(segments))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
