import numpy as np
import pytest

from bessplan.network import LOAD, SLACK, Bus, Line, Network
from bessplan.synth import ScenarioSpec, default_network, line_admittance


def chain(n, candidates=(), pv=None, y=None, load_weight=None):
    """Chain 0 -> 1 -> ... -> n-1 with identical lines."""
    y = line_admittance() if y is None else y
    buses = [Bus(0, SLACK, s_min=np.full(3, -5 - 5j), s_max=np.full(3, 5 + 5j))]
    for j in range(1, n):
        w = np.ones(3) if load_weight is None else load_weight[j]
        buses.append(Bus(j, LOAD, s_min=np.full(3, -2 - 0.5j), s_max=np.full(3, 2 + 0.5j),
                         bess_cost=0.01 * j, bess_candidate=j in candidates, load_weight=w,
                         pv_profile=pv if pv is not None else np.zeros((1, 3), complex)))
    return Network(tuple(buses), tuple(Line(j, j + 1, y) for j in range(n - 1)))


def star(n):
    buses = [Bus(0, SLACK)] + [Bus(j, LOAD) for j in range(1, n)]
    return Network(tuple(buses), tuple(Line(0, j, np.eye(3)) for j in range(1, n)))


@pytest.fixture(scope="session")
def default_net():
    return default_network(ScenarioSpec())


ACCEPTANCE = {}


@pytest.fixture
def verdict():
    """Record and print one PASS/FAIL line for an acceptance criterion."""
    def record(number, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {number:>2}: {detail}"
        ACCEPTANCE[number] = line
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
