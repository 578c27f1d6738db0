import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from quadseries.precision import make_context  # noqa: E402
from quadseries.qsystem import QuadSystem, bundled_system, dong_system  # noqa: E402
from quadseries.stepper import kernel_available  # noqa: E402

# start point for the attractor runs, and the reference end points after T=15 and T=40
START = ("10", "-27.2011", "10", "10")
END_15 = ("6.2355509634533960831", "2.0140572482317481452", "35.4929323328531102196", "-43.5507482101916799734")
END_40 = ("1.6321991613781496393", "8.7300523565474285155", "39.6961687172415982460", "54.8461996449311966025")

BACKENDS = ["python"] + (["mpfr-c"] if kernel_available() else [])

# one line per acceptance criterion, echoed at the end of the run
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def dong():
    return dong_system()


@pytest.fixture(scope="session")
def ctx128():
    return make_context(128)


@pytest.fixture(scope="session")
def riccati():
    # x1' = x1**2 + x2**2, x2' = 0; x2 = 0 gives x' = x**2
    return bundled_system("riccati")


@pytest.fixture(scope="session")
def riccati_1d():
    return QuadSystem.build([[0]], [[[1]]], [0], 10, name="x'=x^2")


@pytest.fixture(scope="session")
def decay():
    # x' = -x
    return QuadSystem.build([[-1]], [[[0]]], [0], 10, name="decay")
