import numpy as np
import pytest

from flowsmp.measure_kit import DiscreteMeasure
from flowsmp.sheet_noise import TimeGrid, make_basis


@pytest.fixture
def mu3():
    return DiscreteMeasure([-1.0, 0.0, 1.5], [0.3, 0.5, 0.2])


@pytest.fixture
def grid20():
    return TimeGrid(1.0, 20)


@pytest.fixture
def basis4():
    return make_basis("hermite", 4)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for key in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[key])
