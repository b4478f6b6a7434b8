import numpy as np
import pytest

from semoctree.synthetic import FacadeSpec, generate

ACCEPTANCE_LINES = []


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_spec():
    """10 m x 7 m façade with a door, five windows, cornice and return walls."""
    return FacadeSpec(width=10.0, height=7.0, window_rows=2, window_cols=3, side_depth=2.0, density=200.0)


@pytest.fixture(scope="session")
def small_facade(small_spec):
    return generate(small_spec)


@pytest.fixture
def record_acceptance():
    def record(criterion, passed, detail):
        ACCEPTANCE_LINES.append(f"criterion {criterion}: {'PASS' if passed else 'FAIL'}  {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
