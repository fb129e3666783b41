from __future__ import annotations

import numpy as np
import pytest

from ezstab.market import shift_family
from ezstab.paths import TimeGrid, make_bundle
from ezstab.preferences import EZPreferences

import oracles


@pytest.fixture(scope="session")
def prefs():
    return EZPreferences(oracles.GAMMA, oracles.PSI, oracles.DELTA)


@pytest.fixture(scope="session")
def rate_family():
    return shift_family(oracles.R, oracles.MU, oracles.SIGMA, a=0.25, eps0=1.0, name="rate-shift")


@pytest.fixture(scope="session")
def drift_family():
    return shift_family(oracles.R, oracles.MU, oracles.SIGMA, b=0.05, eps0=1.0, name="drift-shift")


@pytest.fixture(scope="session")
def flat_family():
    return shift_family(0.0, 0.0, oracles.SIGMA, eps0=1.0, name="flat")


@pytest.fixture(scope="session")
def grid50():
    return TimeGrid(oracles.T, 50)


@pytest.fixture(scope="session")
def bundle_small(grid50):
    return make_bundle(11, 2000, grid50, 1)


@pytest.fixture(scope="session")
def bundle_big(grid50):
    return make_bundle(20240601, 10_000, grid50, 1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE_LINES: dict = {}


@pytest.fixture(scope="session")
def acceptance_log():
    """Record one verdict line per acceptance criterion."""

    def log(number: int, ok: bool, detail: str) -> str:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE_LINES[number] = line
        print(line)
        return line

    return log


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_ACCEPTANCE_LINES):
            terminalreporter.write_line(_ACCEPTANCE_LINES[k])
