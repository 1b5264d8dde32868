import math

import numpy as np
import pytest

from metromd import (
    ConstraintSet,
    CosinePotential,
    LennardJones,
    NoiseTape,
    Partition,
    PhaseState,
    PotentialSplit,
    Rattle,
    Respa,
    RngStream,
    SystemSpec,
    Verlet,
    ZeroPotential,
    accept_probability,
    explicit_step,
    metropolis_substep,
    metropolized_step,
    rattle_substep,
    respa_substep,
    verlet_substep,
)
from metromd.integrate import SolverFailure, StepRecord
from metromd.thermostat import OUParams

from conftest import random_config


class Harmonic:
    """External spring ``k/2 |q - c|^2`` per coordinate; the box is taken large enough never to wrap."""

    def __init__(self, k, centre=500.0):
        self.k, self.c = k, centre

    def energy(self, q):
        return float(0.5 * self.k * np.sum((np.asarray(q) - self.c) ** 2))

    def forces(self, q):
        return -self.k * (np.asarray(q, dtype=float) - self.c)

    def set_energy(self, q, idx):
        return self.energy(np.asarray(q)[idx])

    def set_forces(self, q, idx):
        return self.forces(np.asarray(q)[idx])


def kick(a):
    return np.array([[1.0, 0.0], [-a, 1.0]])


def drift(t):
    return np.array([[1.0, t], [0.0, 1.0]])


def lj_state(n=8, seed=0, dim=2, box=4.0):
    rng = np.random.default_rng(seed)
    spec = SystemSpec.uniform(n, dim, box, 1.0, 0.0)
    q = random_config(rng, n, dim, box, min_dist=0.95)
    return spec, LennardJones(1.9, box), PhaseState(q, rng.normal(0, 0.8, (n, dim)))


def ang_mom(s, centre=5.0):
    r = s.q - centre
    return float(np.sum(r[:, 0] * s.p[:, 1] - r[:, 1] * s.p[:, 0]))


def rotor(omega=2.0, l0=1.0, box=10.0):
    spec = SystemSpec.uniform(2, 2, box, 1.0, 0.0)
    cs = ConstraintSet.dumbbells(1, l0, box)
    q = np.array([[5.0 + l0 / 2, 5.0], [5.0 - l0 / 2, 5.0]])
    v = omega * l0 / 2
    return spec, cs, PhaseState(q, np.array([[0.0, v], [0.0, -v]]))


class TestVerlet:
    def test_hand_iterated_cosine(self):
        spec = SystemSpec.uniform(1, 1, 10.0, 1.0, 0.0)
        pot = CosinePotential(10.0, 1.3)
        k = 2 * math.pi / 10.0
        q, p, h = 2.0, 0.7, 0.1
        s = PhaseState([[q]], [[p]])
        for _ in range(5):
            s = verlet_substep(s, [0], h, spec, pot)
            ph = p - 0.5 * h * 1.3 * k * math.sin(k * q)
            q = q + h * ph
            p = ph - 0.5 * h * 1.3 * k * math.sin(k * q)
        assert s.q[0, 0] == pytest.approx(q, abs=1e-14)
        assert s.p[0, 0] == pytest.approx(p, abs=1e-14)

    def test_harmonic_matrix(self):
        spec = SystemSpec.uniform(1, 1, 1000.0, 1.0, 0.0, mass=2.0)
        h, k = 0.3, 4.0
        M = kick(0.5 * h * k) @ drift(h / 2.0) @ kick(0.5 * h * k)
        s = PhaseState([[501.0]], [[0.4]])
        out = verlet_substep(s, [0], h, spec, Harmonic(k))
        assert np.allclose([out.q[0, 0] - 500, out.p[0, 0]], M @ [1.0, 0.4], atol=1e-12)

    def test_freezes_other_particles(self):
        spec, lj, s = lj_state()
        out = verlet_substep(s, [2, 5], 0.01, spec, lj)
        others = [i for i in range(8) if i not in (2, 5)]
        assert np.array_equal(out.q[others], s.q[others])
        assert np.array_equal(out.p[others], s.p[others])

    def test_global_oracle(self):
        """Trivial-partition sweep equals textbook velocity Verlet with full forces."""
        spec, lj, s = lj_state()
        h = 0.005
        q, p = s.q.copy(), s.p.copy()
        for _ in range(10):
            p = p + 0.5 * h * lj.forces(q)
            q = (q + h * p) % spec.box_length
            p = p + 0.5 * h * lj.forces(q)
        ou = OUParams.from_spec(spec, h)
        rng = RngStream(0)
        for _ in range(10):
            s, rec = explicit_step(s, Partition.trivial(8), Verlet(), h, spec, lj, ou, rng)
        assert np.allclose(s.q, q, atol=1e-12) and np.allclose(s.p, p, atol=1e-12)

    def test_per_particle_oracle(self):
        spec, lj, s = lj_state()
        h = 0.005
        q, p = s.q.copy(), s.p.copy()
        for i in range(8):
            p[i] += 0.5 * h * lj.forces(q)[i]
            q[i] = (q[i] + h * p[i]) % spec.box_length
            p[i] += 0.5 * h * lj.forces(q)[i]
        out, _ = explicit_step(s, Partition.per_particle(8), Verlet(), h, spec, lj,
                               OUParams.from_spec(spec, h), RngStream(0))
        assert np.allclose(out.q, q, atol=1e-12) and np.allclose(out.p, p, atol=1e-12)


def _reverse_check(step, s):
    fwd = step(s)
    back = step(PhaseState(fwd.q, -fwd.p))
    return back


class TestReversibility:
    def test_verlet(self):
        spec, lj, s = lj_state()
        back = _reverse_check(lambda x: verlet_substep(x, [1, 3], 0.01, spec, lj), s)
        assert np.allclose(back.q, s.q, atol=1e-12) and np.allclose(back.p, -s.p, atol=1e-12)

    def test_respa(self):
        spec, lj, s = lj_state()
        split = lj.split(1.2)
        back = _reverse_check(lambda x: respa_substep(x, [4], 0.01, 0.0025, spec, split), s)
        assert np.allclose(back.q, s.q, atol=1e-12)
        assert np.allclose(back.p, -s.p, atol=1e-12)

    def test_rattle(self):
        spec, cs, s = rotor()
        back = _reverse_check(lambda x: rattle_substep(x, 0, 0.05, spec, ZeroPotential(), cs), s)
        assert np.allclose(back.q, s.q, atol=1e-10)
        assert np.allclose(back.p, -s.p, atol=1e-10)


@pytest.mark.parametrize("proposal", ["verlet", "respa"])
def test_volume_preservation(proposal):
    spec, lj, s = lj_state(n=5, seed=3)
    idx = [0, 2]
    split = lj.split(1.2)

    def f(x):
        q, p = s.q.copy(), s.p.copy()
        q[idx] = x[:4].reshape(2, 2)
        p[idx] = x[4:].reshape(2, 2)
        st = PhaseState(q, p)
        out = (verlet_substep(st, idx, 0.02, spec, lj) if proposal == "verlet"
               else respa_substep(st, idx, 0.02, 0.005, spec, split))
        return np.concatenate([out.q[idx].ravel(), out.p[idx].ravel()])

    x0 = np.concatenate([s.q[idx].ravel(), s.p[idx].ravel()])
    eps = 1e-6
    J = np.empty((8, 8))
    for k in range(8):
        e = np.zeros(8)
        e[k] = eps
        J[:, k] = (f(x0 + e) - f(x0 - e)) / (2 * eps)
    assert np.linalg.det(J) == pytest.approx(1.0, abs=1e-6)


class TestRespa:
    def test_n_fast(self):
        assert Respa(0.0025).n_fast(0.01) == 4
        assert Respa(0.003).n_fast(0.01) == 3
        with pytest.raises(ValueError):
            Respa(0.02).n_fast(0.01)

    def test_degenerates_to_verlet(self):
        spec, lj, s = lj_state()
        split = PotentialSplit(lj, ZeroPotential())
        a = respa_substep(s, [0, 6], 0.01, 0.01, spec, split)
        b = verlet_substep(s, [0, 6], 0.01, spec, lj)
        assert np.array_equal(a.q, b.q) and np.array_equal(a.p, b.p)

    def test_harmonic_split_oracle(self):
        kf, ks, h, hf, m = 25.0, 1.5, 0.2, 0.05, 1.0
        spec = SystemSpec.uniform(1, 1, 1000.0, 1.0, 0.0, mass=m)
        split = PotentialSplit(Harmonic(kf), Harmonic(ks))
        F = kick(0.5 * hf * kf) @ drift(hf / m) @ kick(0.5 * hf * kf)
        M = kick(0.5 * h * ks) @ np.linalg.matrix_power(F, 4) @ kick(0.5 * h * ks)
        out = respa_substep(PhaseState([[500.3]], [[-0.2]]), [0], h, hf, spec, split)
        assert np.allclose([out.q[0, 0] - 500, out.p[0, 0]], M @ [0.3, -0.2], atol=1e-12)
        assert np.linalg.det(M) == pytest.approx(1.0)


class TestRattle:
    def test_rigid_rotor(self):
        omega, h = 2.0, 0.01
        spec, cs, s = rotor(omega)
        L0 = ang_mom(s)
        for _ in range(100):
            s = rattle_substep(s, 0, h, spec, ZeroPotential(), cs)
            assert abs(cs[0].value(s.q)) < 1e-11
            assert abs(cs.velocity_residual(s.q, s.p, spec.masses)[0]) < 1e-12
        assert np.allclose(s.p.sum(axis=0), 0.0, atol=1e-12)
        L = ang_mom(s)
        assert L == pytest.approx(L0, abs=1e-12)
        r = cs[0].bond(s.q)
        angle = math.atan2(r[1], r[0])
        assert angle == pytest.approx(omega * 100 * h, abs=1e-3)
        assert 0.5 * np.sum(s.p**2) == pytest.approx(0.5 * omega**2 * 0.5, rel=1e-3)

    def test_solver_failure(self):
        spec, cs, s = rotor(omega=2.0)
        with pytest.raises(SolverFailure):
            rattle_substep(s, 0, 5.0, spec, ZeroPotential(), cs, Rattle(max_iter=1))

    def test_bad_solver(self):
        with pytest.raises(ValueError):
            Rattle(tol=0.0)

    def test_failure_counts_as_rejection(self):
        spec, cs, s = rotor()
        part = Partition.per_dumbbell(1)
        out, ok, dh, failed = metropolis_substep(s, 0, part, Rattle(max_iter=1), 5.0, spec,
                                                 ZeroPotential(), 0.0, cs)
        assert not ok and failed and dh == math.inf
        assert np.array_equal(out.p, -s.p)


class TestAccept:
    @pytest.mark.parametrize("dh, beta, expect", [(0.0, 1.0, 1.0), (-3.0, 1.0, 1.0), (1.0, 1.0, math.exp(-1)),
                                                  (2.0, 0.5, math.exp(-1)), (math.inf, 1.0, 0.0),
                                                  (math.nan, 1.0, 0.0)])
    def test_values(self, dh, beta, expect):
        assert accept_probability(dh, beta) == pytest.approx(expect)

    def test_beta(self):
        with pytest.raises(ValueError):
            accept_probability(0.1, 0.0)

    def test_rejection_negates_set_momenta(self):
        spec, lj, s = lj_state()
        part = Partition.per_particle(8)
        out, ok, dh, _ = metropolis_substep(s, 3, part, Verlet(), 0.01, spec, lj, 1.0)
        assert not ok
        assert np.array_equal(out.q, s.q)
        expect = s.p.copy()
        expect[3] *= -1
        assert np.array_equal(out.p, expect)

    def test_acceptance_uses_energy_change(self):
        spec, lj, s = lj_state()
        part = Partition.per_particle(8)
        prop = verlet_substep(s, part.sets[3], 0.05, spec, lj)
        full = (lj.energy(prop.q) + 0.5 * np.sum(prop.p**2)) - (lj.energy(s.q) + 0.5 * np.sum(s.p**2))
        a = accept_probability(full, spec.beta)
        _, ok_lo, dh, _ = metropolis_substep(s, 3, part, Verlet(), 0.05, spec, lj, 0.999 * a, debug=True)
        _, ok_hi, _, _ = metropolis_substep(s, 3, part, Verlet(), 0.05, spec, lj, min(1.001 * a, 0.9999999))
        assert dh == pytest.approx(full, abs=1e-10)
        assert ok_lo and (a == 1.0 or not ok_hi)


class TestStep:
    def test_replay_from_recorded_noise(self):
        spec, lj, s = lj_state()
        spec = SystemSpec.uniform(8, 2, spec.box_length, 1.0, 1.0)
        part = Partition.per_particle(8)
        ou = OUParams.from_spec(spec, 0.02)
        rng = RngStream(5)
        s1, rec = metropolized_step(s, part, Verlet(), 0.02, spec, lj, ou, rng)
        xi = RngStream(5)
        xi.metropolis.random(8)
        tape = NoiseTape(rec.zeta, xi.thermostat.standard_normal((8, 2)))
        s2, rec2 = metropolized_step(s, part, Verlet(), 0.02, spec, lj, ou, tape)
        assert np.array_equal(s1.q, s2.q) and np.array_equal(s1.p, s2.p)
        assert np.array_equal(rec.accepted, rec2.accepted)

    def test_record(self):
        spec, lj, s = lj_state()
        part = Partition.per_particle(8)
        _, rec = metropolized_step(s, part, Verlet(), 0.01, spec, lj, OUParams.from_spec(spec, 0.01), RngStream(1))
        assert rec.accepted.shape == (8,) and rec.zeta.shape == (8,)
        assert np.all((rec.accept_prob >= 0) & (rec.accept_prob <= 1))
        row = rec.csv_row(4).split(",")
        assert row[0] == "4" and int(row[1]) == int(rec.accepted.sum()) and row[3] == "0"
        assert StepRecord.CSV_HEADER == "step,n_accepted,mean_delta_h,failures"

    def test_explicit_accepts_everything(self):
        spec, lj, s = lj_state()
        _, rec = explicit_step(s, Partition.per_particle(8), Verlet(), 0.05, spec, lj,
                               OUParams.from_spec(spec, 0.05), RngStream(1))
        assert rec.accepted.all() and rec.zeta is None

    def test_dumbbell_step_stays_on_manifold(self):
        from metromd.constraints import place_dumbbells

        rng = np.random.default_rng(1)
        box = 6.0
        spec = SystemSpec.uniform(8, 2, box, 1.0, 1.0)
        cs = ConstraintSet.dumbbells(4, 1.0, box)
        lj = LennardJones(2.5, box, exclude=cs.exclusions())
        q, p = cs.project_to_manifold(place_dumbbells(4, 1.0, box, 2, rng), rng.normal(size=(8, 2)), spec)
        s = PhaseState(q, p)
        ou = OUParams.from_spec(spec, 0.005)
        stream = RngStream(2)
        for _ in range(20):
            s, rec = metropolized_step(s, Partition.per_dumbbell(4), Rattle(), 0.005, spec, lj, ou, stream, cs)
        cs.check(s.q, s.p, spec.masses, 1e-10)
