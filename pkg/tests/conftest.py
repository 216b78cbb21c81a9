import numpy as np
import pytest

from misreg import presets


@pytest.fixture(scope="session")
def chara():
    return presets.build_system("chara")


@pytest.fixture(scope="session")
def sim20():
    return presets.build_system("sim20ff")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
