import sys, pathlib; sys.path.insert(0, str(pathlib.Path(__file__).parent))
import numpy as np
import pytest
from hypothesis import settings

from mfcontrol.fields import ControlSet, builtin_cost, builtin_field
from mfcontrol.flow import TimeGrid
from mfcontrol.measures import EmpiricalMeasure
from mfcontrol.value import ExhaustiveValue

settings.register_profile("ci", max_examples=40, deadline=None)
settings.load_profile("ci")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def shift_problem():
    """``v = u`` on the line, ``U = {-1, 0, 1}``, ``phi = int x^2``, four intervals on ``[0, 1]``."""
    field = builtin_field("constant_control", {"u_max": 1.0})
    cost = builtin_cost("potential", {"Q": [[1.0]]})
    U = ControlSet([-1.0, 0.0, 1.0])
    cg = TimeGrid(0.0, 1.0, 4)
    handle = ExhaustiveValue(field, cost, U, cg).fit()
    return {"field": field, "cost": cost, "U": U, "control_grid": cg, "grid": cg.refine(250),
            "handle": handle, "m0": EmpiricalMeasure.dirac([2.0])}


_ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = []


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line for an acceptance criterion."""
    lines = request.config.stash[_ACCEPTANCE]

    def report(number, passed, detail):
        line = f"{'PASS' if passed else 'FAIL'}  criterion {number:>2}: {detail}"
        lines.append((number, line))
        print(line)
        return passed

    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash[_ACCEPTANCE]
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
