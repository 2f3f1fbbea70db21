import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

_ACCEPTANCE_LINES = {}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def record_criterion():
    """Record one PASS/FAIL line per acceptance criterion; all lines are echoed in the terminal summary."""

    def record(number, title, passed, detail=""):
        line = f"{'PASS' if passed else 'FAIL'}  criterion {number}: {title}" + (f"  [{detail}]" if detail else "")
        _ACCEPTANCE_LINES[number] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_ACCEPTANCE_LINES):
            terminalreporter.write_line(_ACCEPTANCE_LINES[number])
