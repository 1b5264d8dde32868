"""Wall-clock per step of the compiled chain loop against the pure-Python loop.

    python benchmarks/bench_kernels.py [--steps N] [--python-steps M]

Both backends run the same chain from the same seed; the script also checks
that they end in the same state.
"""

import argparse
import time

import numpy as np

from metromd import (
    HAVE_COMPILED,
    ConstraintSet,
    LennardJones,
    Partition,
    PhaseState,
    Rattle,
    Respa,
    RngStream,
    SystemSpec,
    Verlet,
    lattice_init,
    run_chain,
    sample_maxwell,
)
from metromd.constraints import place_dumbbells


def fluid(n=25):
    box = (n / 0.8442) ** 0.5
    spec = SystemSpec.uniform(n, 2, box, 1 / 0.728, 1.0)
    lj = LennardJones(2.5, box)
    state = PhaseState(lattice_init(spec), sample_maxwell(spec, RngStream(0)))
    return spec, lj, state


def dumbbells(n_db=15):
    box = (2 * n_db / 0.998) ** 0.5
    spec = SystemSpec.uniform(2 * n_db, 2, box, 1 / 3.0, 1.0)
    cs = ConstraintSet.dumbbells(n_db, 1.0, box)
    lj = LennardJones(3.0, box, exclude=cs.exclusions())
    rng = np.random.default_rng(0)
    q = place_dumbbells(n_db, 1.0, box, 2, rng, min_separation=0.8)
    q, p = cs.project_to_manifold(q, rng.normal(0, 3**0.5, q.shape), spec)
    return spec, cs, lj, PhaseState(q, p)


def cases():
    spec, lj, state = fluid()
    yield "LJ n=25 trivial Verlet", (state, spec, Partition.trivial(25), Verlet(), 0.005, lj), {}
    yield "LJ n=25 per-particle Verlet", (state, spec, Partition.per_particle(25), Verlet(), 0.005, lj), {}
    yield "LJ n=25 per-particle RESPA", (state, spec, Partition.per_particle(25), Respa(0.0025), 0.005,
                                         lj.split(1.5)), {}
    spec, cs, lj, state = dumbbells()
    yield "15 dumbbells RATTLE", (state, spec, Partition.per_dumbbell(15), Rattle(), 0.005, lj), \
        {"constraints": cs}


def timed(args, kw, steps, backend):
    t = time.perf_counter()
    res = run_chain(*args, RngStream(1), steps, backend=backend, **kw)
    return (time.perf_counter() - t) / steps, res


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=20000, help="steps for the compiled backend")
    ap.add_argument("--python-steps", type=int, default=200, help="steps for the Python backend")
    args = ap.parse_args()
    if not HAVE_COMPILED:
        raise SystemExit("compiled kernels are not built; reinstall with Cython available")
    print(f"{'case':32s} {'python us/step':>15s} {'compiled us/step':>17s} {'speed-up':>9s}  agree")
    for name, a, kw in cases():
        t_py, r_py = timed(a, kw, args.python_steps, "python")
        _, r_c = timed(a, kw, args.python_steps, "compiled")
        t_c, _ = timed(a, kw, args.steps, "compiled")
        agree = np.allclose(r_py.state.p, r_c.state.p, atol=1e-8)
        print(f"{name:32s} {t_py * 1e6:15.1f} {t_c * 1e6:17.2f} {t_py / t_c:9.0f}  {agree}")


if __name__ == "__main__":
    main()
