import numpy as np
import pytest

from entvol.model import ModelSpec, derive_scales
from entvol.pde import CGLSolver, Field, random_initial_field


CHAOTIC = dict(alpha=2.0, beta=-2.0, q_star=2.8)


@pytest.fixture(scope="session")
def chaotic_spec():
    return ModelSpec.cgl(**CHAOTIC)


@pytest.fixture(scope="session")
def chaotic_scales(chaotic_spec):
    return derive_scales(chaotic_spec)


@pytest.fixture(scope="session")
def chaotic_setup(chaotic_spec, chaotic_scales):
    """Post-transient field on L = 64 delta*, G = 1024, dt = tau*/8."""
    sc = chaotic_scales
    L, G, dt = 64 * sc.delta_star, 1024, sc.tau_star / 8
    solver = CGLSolver(chaotic_spec, G, L, dt)
    f = random_initial_field(chaotic_spec, G, L, 1, sc.tau_star)
    f = solver.evolve(f, 4000 * dt, None)[-1]
    return {"field": Field(f.components, L, 0.0), "L": L, "G": G, "dt": dt, "solver": solver}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line for a criterion; the lines are repeated in the summary."""

    def report(name, ok, detail, elapsed, limit):
        within = elapsed < limit
        status = "PASS" if ok and within else "FAIL"
        line = f"{status}  {name}: {detail}; runtime {elapsed:.1f} s (limit {limit:.0f} s)"
        _ACCEPTANCE_LINES.append(line)
        print(line)
        return ok and within

    return report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
