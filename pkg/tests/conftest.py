import numpy as np
import pytest

from ctbench.scanner import ScanGeometry, ScanSetup

_CRITERIA: dict = {}


def record_criterion(number: int, title: str, passed: bool, detail: str = "") -> None:
    line = f"criterion {number:2d} [{'PASS' if passed else 'FAIL'}] {title}" + (f": {detail}" if detail else "")
    _CRITERIA[number] = line
    print(line)


@pytest.fixture
def criterion():
    return record_criterion


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[k])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# A reduced scanner for fast unit tests: 128 px at 0.5 mm, 180 views, 200 detectors.
SMALL_SETUP = ScanSetup(geometry=ScanGeometry(n_views=180, n_detectors=200), size=128, supersample=4)


@pytest.fixture
def small_setup():
    return SMALL_SETUP
