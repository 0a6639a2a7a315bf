import numpy as np
import pytest

from xfertune.core import DatasetProfile, NetworkProfile, ParamTriple, TransferLogEntry


@pytest.fixture
def net():
    return NetworkProfile(10000.0, 40.0, 4 << 20, 1200.0, 1200.0, "a", "b")


@pytest.fixture
def dataset():
    return DatasetProfile(64 << 20, 100)


def make_entry(net, ds, cc=1, p=1, pp=1, th=100.0, ts=0.0, out=0.0):
    return TransferLogEntry(net, ds, ParamTriple(cc, p, pp), th, ts, out, 0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES
    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
