import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from fklab.model import CouplingKernel

settings.register_profile("fklab", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("fklab")


@pytest.fixture
def nn2():
    return CouplingKernel.nearest_neighbor(2)


@pytest.fixture
def nn1():
    return CouplingKernel.nearest_neighbor(1)


def range2_1d():
    return CouplingKernel.from_pairs([([1], 1.0), ([2], 1.0)])


def z_ok(est, target, limit=3.0):
    return abs(est.z_against(target)) <= limit


_VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line per acceptance criterion; printed in the terminal summary."""

    def record(name, passed, detail=""):
        line = f"{'PASS' if passed else 'FAIL'}  {name}  {detail}".rstrip()
        _VERDICTS.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
