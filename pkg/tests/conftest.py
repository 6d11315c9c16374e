import numpy as np
import pytest

from grjointnet.core import make_rng


@pytest.fixture
def rng():
    return make_rng(1234)


def interior_points(rng, count, margin=1e-3):
    return rng.uniform(-1 + margin, 1 - margin, size=(count, 3))


# Acceptance criteria append (name, passed, detail) here; printed after the run.
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in ACCEPTANCE_LINES:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
