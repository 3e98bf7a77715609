import numpy as np
import pytest

from corrfrail.dataset import CompetingRisksDataset

ACCEPTANCE_LINES = []


@pytest.fixture
def three_subjects():
    return CompetingRisksDataset(time=[1.0, 2.0, 3.0], status=[1, 2, 0])


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
