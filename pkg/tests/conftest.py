import numpy as np
import pytest

from wsmerge.pipeline import DEFAULT_PIPELINE
from wsmerge.toy import ToyTaskSpec

_ACCEPTANCE_LINES = []


def record_criterion(number, name, passed, detail=""):
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {name}"
    if detail:
        line += f" ({detail})"
    _ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def task_specs():
    return [ToyTaskSpec.from_dict({**t, "seed": 100 + i + 1})
            for i, t in enumerate(DEFAULT_PIPELINE["tasks"])]
