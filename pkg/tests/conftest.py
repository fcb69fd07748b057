import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from tapret.backend import ToyBackend, ToyConfig  # noqa: E402


@pytest.fixture(scope="session")
def toy():
    return ToyBackend(ToyConfig(seed=1729))


@pytest.fixture(scope="session")
def zero_mlp():
    return ToyBackend(ToyConfig(seed=1729, zero_mlp=True))


def pytest_terminal_summary(terminalreporter):
    from _acceptance_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
