from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

import cl_observer
from cl_observer.manifest import load_gains
from cl_observer.model_core import derive_jacobian_bounds
from cl_observer.models import BENCHMARK_THETA, benchmark_model
from cl_observer.sim import Diagnostics, benchmark_scenario, run_scenario

DATA = Path(cl_observer.__file__).parent / "data"

# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])


@pytest.fixture(scope="session")
def model():
    return benchmark_model()


@pytest.fixture(scope="session")
def theta_true():
    return BENCHMARK_THETA.copy()


@pytest.fixture(scope="session")
def shipped():
    return load_gains(DATA / "benchmark_gains.json")


@pytest.fixture(scope="session")
def gains(shipped):
    return shipped.gains


@pytest.fixture(scope="session")
def bounds(shipped):
    return shipped.bounds


@pytest.fixture(scope="session")
def wide_bounds(model):
    """Bounds over the symmetric +-[1, 1, .5, .5] parameter box."""
    tbox = np.array([[-1, 1], [-1, 1], [-0.5, 0.5], [-0.5, 0.5]], dtype=float)
    return derive_jacobian_bounds(model, [[-3, 3], [-3, 3]], [[-450, 450]], tbox,
                                  grid_density=101)


def _run(**kw):
    sc = benchmark_scenario(gains_file=DATA / "benchmark_gains.json", **kw)
    return run_scenario(sc)


# closed-loop runs shared across modules (each costs seconds)

@pytest.fixture(scope="session")
def run_full_1e8():
    return _run(tol=1e-8)


@pytest.fixture(scope="session")
def run_full_1e10():
    import time
    t0 = time.perf_counter()
    log = _run(tol=1e-10)
    log.wall_time = time.perf_counter() - t0
    return log


@pytest.fixture(scope="session")
def run_pinned():
    return _run(tol=1e-8, diagnostics=Diagnostics(pin_theta=True, freeze_stacks=True))


@pytest.fixture(scope="session")
def run_pinned_1e10():
    return _run(tol=1e-10, diagnostics=Diagnostics(pin_theta=True, freeze_stacks=True))


@pytest.fixture(scope="session")
def run_from_plant():
    return _run(tol=1e-8, diagnostics=Diagnostics(regress_from_plant=True))


@pytest.fixture(scope="session")
def run_zero():
    from cl_observer.sim import load_scenario
    return run_scenario(load_scenario(DATA / "zero_excitation_scenario.json"))
