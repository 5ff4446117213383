import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from relaxctl.core import (
    Coefficients,
    ControlSet,
    Jump,
    Mode,
    Problem,
    RewardSpec,
    StateLattice,
    TimeGrid,
    constant,
)

settings.register_profile("repo", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


def make_problem(drift=0.0, var=0.0, jumps=(), running=0.0, terminal=0.0, T=1.0, n_steps=10, lower=-1.0, upper=1.0,
                 h=0.5, atoms=(0.0,), x0=0.0, stopping=None, mode=Mode.CONTROL):
    """Constant-coefficient 1-d problem with constant rewards."""
    grid = TimeGrid(0.0, T, n_steps)
    lat = StateLattice((lower,), (upper,), (h,))
    coeffs = Coefficients(constant([drift], (1,)), constant([[var]], (1, 1)),
                          tuple(Jump(constant(lam, ()), [z]) for lam, z in jumps), time_homogeneous=True)
    rewards = RewardSpec(
        running=lambda t, x, u: np.full(len(x), float(running)),
        terminal=lambda x: np.full(len(x), float(terminal)),
        stopping=stopping,
    )
    return Problem(grid, lat, ControlSet(list(atoms)), coeffs, rewards, mode, (x0,))


@pytest.fixture
def problem_factory():
    return make_problem


def pytest_terminal_summary(terminalreporter):
    from . import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(test_acceptance.RESULTS):
            terminalreporter.write_line(line)
