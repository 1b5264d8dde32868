import warnings

import numpy as np
import pytest
from hypothesis import settings

from metromd import LennardJones, Partition, PhaseState, RngStream, SystemSpec, lattice_init, sample_maxwell

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")

RHO = 0.8442
TEMP = 0.728


def fluid_spec(n=25, dim=2, density=RHO, temperature=TEMP, gamma=1.0):
    box = (n / density) ** (1.0 / dim)
    return SystemSpec.uniform(n, dim, box, 1.0 / temperature, gamma)


@pytest.fixture
def fluid():
    """Equilibrated-ish 25-particle 2-D LJ liquid: (spec, potential, state)."""
    spec = fluid_spec()
    lj = LennardJones(2.5, spec.box_length)
    rng = RngStream(7)
    state = PhaseState(lattice_init(spec), sample_maxwell(spec, rng))
    from metromd.chain import run_chain

    state = run_chain(state, spec, Partition.per_particle(25), _verlet(), 0.005, lj, rng, 2000).state
    return spec, lj, state


def _verlet():
    from metromd import Verlet

    return Verlet()


def random_config(rng, n, dim, box, min_dist=0.8):
    """Random positions with all nearest-image distances above ``min_dist``."""
    q = np.empty((n, dim))
    k = 0
    while k < n:
        x = rng.uniform(0, box, dim)
        dx = q[:k] - x
        dx -= box * np.round(dx / box)
        if k == 0 or np.min(np.sum(dx * dx, axis=1)) > min_dist**2:
            q[k] = x
            k += 1
    return q


@pytest.fixture(autouse=True)
def _quiet_cutoff_warnings():
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message="r_cut=.*exceeds half the box")
        yield


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
