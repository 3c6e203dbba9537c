import os
from pathlib import Path

import numpy as np
import pytest

from thetarbm.data import ImageDataset
from thetarbm.rotation import build_support_set


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def exact4():
    return build_support_set([0, 90, 180, 270], 6, "exact")


@pytest.fixture
def tiny_ds(rng):
    side = 6
    return ImageDataset(rng.random((40, side * side)), rng.integers(0, 10, 40), side)


@pytest.fixture(scope="session")
def desk_dir(tmp_path_factory):
    """Desk-scale mnist / mnist-rot files.

    ``THETARBM_DESK_DIR`` may point at a directory laid out like
    ``deskdata.build`` output (``mnist/*-ubyte``, ``mnist-rot/*.amat``), e.g.
    real dataset files; otherwise one is built from the bundled digits.
    """
    given = os.environ.get("THETARBM_DESK_DIR")
    if given:
        return Path(given)
    pytest.importorskip("mlxtend")
    from thetarbm import deskdata

    cache = Path(os.environ.get("THETARBM_DESK_CACHE", tmp_path_factory.mktemp("desk")))
    return deskdata.build(cache)


ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
