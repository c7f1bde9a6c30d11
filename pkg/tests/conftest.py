import numpy as np
import pytest

from microcsi.signal import build_config


@pytest.fixture(scope="session")
def config():
    return build_config(64, "ht20", 8)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import VERDICTS

    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
