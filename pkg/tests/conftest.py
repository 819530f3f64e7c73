import numpy as np
import pytest
from hypothesis import settings

from dfm.datasets import banded_chain
from dfm.flows import TabularDistribution

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def toy():
    """S=4, D=3 chain where each token repeats with prob 0.7 or increments."""
    return banded_chain(4, 3)


@pytest.fixture(scope="session")
def coin_pair():
    """S=2, D=2 with correlated dimensions."""
    return TabularDistribution(2, np.array([[0, 0], [1, 1], [0, 1]]), np.array([0.4, 0.4, 0.2]))


_CRITERIA: dict = {}


class CriterionLog:
    """Collects the sub-checks of one acceptance criterion."""

    def __init__(self, number: int, title: str):
        self.number, self.title, self.checks = number, title, []

    def check(self, label: str, ok: bool, detail: str = "") -> bool:
        self.checks.append((label, bool(ok), detail))
        return bool(ok)

    @property
    def passed(self) -> bool:
        return bool(self.checks) and all(ok for _, ok, _ in self.checks)

    def assert_all(self):
        failed = [f"{label}: {detail}" for label, ok, detail in self.checks if not ok]
        assert not failed, "; ".join(failed)


@pytest.fixture
def criterion():
    def make(number: int, title: str) -> CriterionLog:
        log = CriterionLog(number, title)
        _CRITERIA[number] = log
        return log

    return make


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        log = _CRITERIA[number]
        tr.write_line(f"criterion {number:2d} {'PASS' if log.passed else 'FAIL'}  {log.title}")
        for label, ok, detail in log.checks:
            tr.write_line(f"    [{'ok' if ok else 'FAIL'}] {label}  {detail}")
