import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from metromd import SystemSpec
from metromd.constraints import ConstraintError, ConstraintSet, DumbbellConstraint, place_dumbbells


def test_value_across_boundary():
    c = DumbbellConstraint(0, 1, 1.0, 5.0)
    q = np.array([[0.2, 1.0], [4.7, 1.0]])
    assert np.allclose(c.bond(q), [0.5, 0.0])
    assert c.value(q) == pytest.approx(0.25 - 1.0)


@given(st.lists(st.floats(0, 5), min_size=6, max_size=6))
def test_gradient_matches_finite_difference(xs):
    c = DumbbellConstraint(0, 1, 1.0, 5.0)
    q = np.array(xs).reshape(2, 3)
    if np.linalg.norm(c.bond(q)) > 2.4:
        return  # stay clear of the minimum-image switch
    eps = 1e-6
    fd = np.zeros_like(q)
    for idx in np.ndindex(q.shape):
        qp, qm = q.copy(), q.copy()
        qp[idx] += eps
        qm[idx] -= eps
        fd[idx] = (c.value(qp) - c.value(qm)) / (2 * eps)
    assert np.allclose(c.gradient(q), fd, atol=1e-6)


@pytest.mark.parametrize("kw", [dict(a=0, b=0, rest_length=1.0, box_length=5.0),
                                dict(a=0, b=1, rest_length=2.6, box_length=5.0),
                                dict(a=0, b=1, rest_length=0.0, box_length=5.0)])
def test_bad_constraint(kw):
    with pytest.raises(ValueError):
        DumbbellConstraint(**kw)


def test_particles_in_one_bond_only():
    with pytest.raises(ValueError):
        ConstraintSet([DumbbellConstraint(0, 1, 1.0, 5.0), DumbbellConstraint(1, 2, 1.0, 5.0)])


def test_dumbbell_set():
    cs = ConstraintSet.dumbbells(3, 1.0, 6.0)
    assert len(cs) == 3
    assert cs.exclusions() == [(0, 1), (2, 3), (4, 5)]


def test_projection_onto_manifold():
    rng = np.random.default_rng(3)
    spec = SystemSpec.uniform(8, 2, 6.0, 1.0, 1.0)
    cs = ConstraintSet.dumbbells(4, 1.0, 6.0)
    q = place_dumbbells(4, 1.0, 6.0, 2, rng)
    q_raw = q + rng.normal(0, 0.05, q.shape)
    p_raw = rng.normal(size=q.shape)
    qp, pp = cs.project_to_manifold(q_raw, p_raw, spec)
    assert np.max(np.abs(cs.constraint_value(qp))) < 1e-12
    assert np.max(np.abs(cs.velocity_residual(qp, pp, spec.masses))) < 1e-12
    cs.check(qp, pp, spec.masses, 1e-10)
    # centres of mass are kept
    for c in cs:
        before = q_raw[c.b] + 0.5 * c.bond(q_raw)
        after = qp[c.b] + 0.5 * c.bond(qp)
        d = (after - before + 3.0) % 6.0 - 3.0
        assert np.allclose(d, 0.0, atol=1e-12)
    # a second projection changes nothing
    q2, p2 = cs.project_to_manifold(qp, pp, spec)
    assert np.allclose(q2, qp, atol=1e-12) and np.allclose(p2, pp, atol=1e-12)


def test_check_raises_off_manifold():
    spec = SystemSpec.uniform(2, 2, 6.0, 1.0, 1.0)
    cs = ConstraintSet.dumbbells(1, 1.0, 6.0)
    q = np.array([[1.0, 1.0], [2.1, 1.0]])
    with pytest.raises(ConstraintError):
        cs.check(q, np.zeros_like(q), spec.masses, 1e-8)
    q[1, 0] = 2.0
    with pytest.raises(ConstraintError):
        cs.check(q, np.array([[1.0, 0.0], [0.0, 0.0]]), spec.masses, 1e-8)
    cs.check(q, np.array([[0.0, 1.0], [0.0, 0.0]]), spec.masses, 1e-8)


def test_degenerate_bond():
    spec = SystemSpec.uniform(2, 2, 6.0, 1.0, 1.0)
    cs = ConstraintSet.dumbbells(1, 1.0, 6.0)
    with pytest.raises(ConstraintError):
        cs.project_to_manifold(np.ones((2, 2)), np.zeros((2, 2)), spec)


@pytest.mark.parametrize("dim", [2, 3])
def test_placement(dim):
    rng = np.random.default_rng(dim)
    q = place_dumbbells(10, 1.0, 5.0, dim, rng, min_separation=0.8)
    cs = ConstraintSet.dumbbells(10, 1.0, 5.0)
    assert np.max(np.abs(cs.constraint_value(q))) < 1e-12
    assert np.all((q >= 0) & (q < 5.0))
    for a in range(20):
        for b in range(a + 1, 20):
            if b == a + 1 and a % 2 == 0:
                continue
            d = (q[a] - q[b] + 2.5) % 5.0 - 2.5
            assert np.linalg.norm(d) >= 0.8 - 1e-12


def test_placement_gives_up():
    with pytest.raises(RuntimeError):
        place_dumbbells(50, 1.0, 3.0, 2, np.random.default_rng(0), max_tries=2000)
