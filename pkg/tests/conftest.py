import numpy as np
import pytest

from seqcount.episodes import META_TRAIN, TaskConfig, sample_task


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_task():
    return sample_task(np.random.default_rng(3), META_TRAIN, TaskConfig(ways=(3, 3)))


ACCEPTANCE_LINES = {}


def record_acceptance(criterion: str, passed: bool, detail: str) -> None:
    line = f"{criterion} {'PASS' if passed else 'FAIL'} {detail}"
    ACCEPTANCE_LINES[criterion] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])
