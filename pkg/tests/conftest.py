import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from sparseinit.experiments import make_case, make_target
from sparseinit.grid import make_grid
from sparseinit.pde import Coefficients, Region, assemble_operator, estimate_opnorm

settings.register_profile(
    "default",
    deadline=None,
    max_examples=40,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("default")

CASES = ("I", "II", "III")


@pytest.fixture(scope="session")
def desk():
    """Desk-scale operator, reachable target and opnorm for each case."""
    out = {}
    for c in CASES:
        cfg = make_case(c)
        op = cfg.operator()
        out[c] = (cfg, op, make_target(cfg, op), estimate_opnorm(op))
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def small_operator(nx=5, ny=5, d=0.05, v=(1.0, -0.5), dt=0.05, nsteps=2):
    """Operator on a tiny ``nx x ny`` interior grid of the unit-height strip."""
    grid = make_grid((nx + 1) * 0.1, (ny + 1) * 0.1, 0.1, 0.1)
    coeffs = Coefficients([Region(0, grid.lx, 0, grid.ly, d, *v)])
    return assemble_operator(grid, coeffs, dt, nsteps)


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
