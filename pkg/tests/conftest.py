import hypothesis
import numpy as np
import pytest

from nmsa.dynamics import SimParams
from nmsa.ensemble import generate_ensemble
from nmsa.protocol import build_schedule

np.seterr(all="warn", under="ignore")

hypothesis.settings.register_profile("default", max_examples=50, deadline=None)
hypothesis.settings.register_profile("fast", max_examples=10, deadline=None)
hypothesis.settings.load_profile("default")

TAU2 = 1.8e-6


@pytest.fixture(scope="session")
def params():
    return SimParams()


@pytest.fixture(scope="session")
def noiseless_ensemble(params):
    """2e4 linear noiseless runs of the reference protocol, 12 us windows."""
    p = params.noiseless().linear()
    sched = build_schedule(0.0, TAU2, 0.0, p.omega_c, p.omega_i, pre=12e-6, post=12e-6)
    return generate_ensemble(p, sched, 20000, 1)


ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
