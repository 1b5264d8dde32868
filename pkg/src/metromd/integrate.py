"""Per-set proposal maps and the Metropolis accept/reject patch.

One step of the patched integrator sweeps the partition sets in ascending
order. For each set a deterministic, symmetric, volume-preserving proposal
(Verlet, RESPA or RATTLE) moves only that set; it is accepted with probability
``min(1, exp(-beta dH))`` and otherwise the set's momenta are negated. A single
thermostat step follows the sweep.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import PhaseState, RngStream, wrap_position
from .potential import OverlapError, PotentialSplit, local_energy_delta
from .thermostat import constrained_ou_step, ou_step

__all__ = [
    "Verlet",
    "Respa",
    "Rattle",
    "SolverFailure",
    "StepRecord",
    "verlet_substep",
    "respa_substep",
    "rattle_substep",
    "accept_probability",
    "metropolis_substep",
    "metropolized_step",
    "explicit_step",
]


@dataclass(frozen=True)
class Verlet:
    name = "verlet"


@dataclass(frozen=True)
class Respa:
    """Multiple-time-step proposal: slow kicks at ``h``, ``floor(h / h_fast)`` fast Verlet steps."""

    h_fast: float
    name = "respa"

    def n_fast(self, h):
        n = int(math.floor(h / self.h_fast + 1e-9))
        if n < 1:
            raise ValueError("RESPA needs h_fast <= h")
        return n


@dataclass(frozen=True)
class Rattle:
    tol: float = 1e-12
    max_iter: int = 50
    name = "rattle"

    def __post_init__(self):
        if not self.tol > 0 or self.max_iter < 1:
            raise ValueError("RATTLE solver needs tol > 0 and max_iter >= 1")


class SolverFailure(RuntimeError):
    """The position-constraint multiplier solve did not converge."""


@dataclass
class StepRecord:
    """Outcome of one sweep: accept flags, energy changes and solver failures per set."""

    accepted: np.ndarray
    delta_h: np.ndarray
    accept_prob: np.ndarray
    failures: int = 0
    zeta: np.ndarray = field(default=None)

    def csv_row(self, step):
        finite = self.delta_h[np.isfinite(self.delta_h)]
        mean_dh = float(np.mean(finite)) if finite.size else float("inf")
        return f"{step},{int(np.sum(self.accepted))},{mean_dh:.10g},{self.failures}"

    CSV_HEADER = "step,n_accepted,mean_delta_h,failures"


def _with_set(state, idx, q_new, p_new):
    q = state.q.copy()
    p = state.p.copy()
    q[idx] = q_new
    p[idx] = p_new
    return PhaseState(q, p)


def verlet_substep(state, idx, h, spec, potential) -> PhaseState:
    """Half kick, drift, half kick on the particles ``idx``; all others frozen."""
    idx = np.asarray(idx, dtype=np.intp)
    m = spec.masses[idx][:, None]
    p_half = state.p[idx] + 0.5 * h * potential.set_forces(state.q, idx)
    q = state.q.copy()
    q[idx] = wrap_position(state.q[idx] + h * p_half / m, spec.box_length)
    p = state.p.copy()
    p[idx] = p_half + 0.5 * h * potential.set_forces(q, idx)
    return PhaseState(q, p)


def respa_substep(state, idx, h, h_fast, spec, split: PotentialSplit) -> PhaseState:
    """Slow half kick, ``floor(h / h_fast)`` fast Verlet steps of size ``h_fast``, slow half kick."""
    idx = np.asarray(idx, dtype=np.intp)
    n_fast = Respa(h_fast).n_fast(h)
    m = spec.masses[idx][:, None]
    q = state.q.copy()
    p = state.p.copy()
    pj = p[idx] + 0.5 * h * split.slow.set_forces(q, idx)
    for _ in range(n_fast):
        pj = pj + 0.5 * h_fast * split.fast.set_forces(q, idx)
        q[idx] = wrap_position(q[idx] + h_fast * pj / m, spec.box_length)
        pj = pj + 0.5 * h_fast * split.fast.set_forces(q, idx)
    p[idx] = pj + 0.5 * h * split.slow.set_forces(q, idx)
    return PhaseState(q, p)


def rattle_substep(state, j, h, spec, potential, constraints, solver=Rattle()):
    """Constrained Verlet move of the dumbbell ``j``.

    The position multiplier comes from a scalar Newton iteration on the bond
    length; the velocity multiplier from the exact linear tangency condition.
    Raises :class:`SolverFailure` if Newton does not reach ``solver.tol``.
    """
    c = constraints[j]
    idx = np.array([c.a, c.b])
    ma, mb = spec.masses[c.a], spec.masses[c.b]
    msum = 1.0 / ma + 1.0 / mb
    r0 = c.bond(state.q)
    grad0 = np.stack([2.0 * r0, -2.0 * r0])
    p_free = state.p[idx] + 0.5 * h * potential.set_forces(state.q, idx)
    # bond vector after an unconstrained drift
    r_free = r0 + h * (p_free[0] / ma - p_free[1] / mb)
    # r(lam) = r_free - h^2 lam msum r0
    lam = 0.0
    l0sq = c.rest_length**2
    for _ in range(solver.max_iter):
        r = r_free - h * h * lam * msum * r0
        g = r @ r - l0sq
        if abs(g) <= solver.tol:
            break
        dg = -2.0 * h * h * msum * (r @ r0)
        if dg == 0 or not np.isfinite(dg):
            raise SolverFailure(f"singular Newton derivative for dumbbell {j}")
        lam -= g / dg
    else:
        r = r_free - h * h * lam * msum * r0
        if not abs(r @ r - l0sq) <= solver.tol:
            raise SolverFailure(f"Newton did not converge for dumbbell {j}")
    p_half = p_free - 0.5 * h * lam * grad0
    q = state.q.copy()
    q[idx] = wrap_position(state.q[idx] + h * p_half / np.array([[ma], [mb]]), spec.box_length)
    r1 = r_free - h * h * lam * msum * r0
    p_hat = p_half + 0.5 * h * potential.set_forces(q, idx)
    v = p_hat[0] / ma - p_hat[1] / mb
    mu = (r1 @ v) / (h * msum * (r1 @ r1))
    p = state.p.copy()
    p[idx] = p_hat - 0.5 * h * mu * np.stack([2.0 * r1, -2.0 * r1])
    return PhaseState(q, p)


def accept_probability(delta_h, beta) -> float:
    """``min(1, exp(-beta dH))``; NaN or ``+inf`` energy changes give 0."""
    if not beta > 0:
        raise ValueError("beta must be positive")
    if math.isnan(delta_h):
        return 0.0
    if delta_h <= 0:
        return 1.0
    return math.exp(-beta * delta_h)


def _propose(state, j, idx, proposal, h, spec, potential, constraints):
    if isinstance(proposal, Verlet):
        return verlet_substep(state, idx, h, spec, potential)
    if isinstance(proposal, Respa):
        return respa_substep(state, idx, h, proposal.h_fast, spec, potential)
    if isinstance(proposal, Rattle):
        return rattle_substep(state, j, h, spec, potential, constraints, proposal)
    raise TypeError(f"unknown proposal {proposal!r}")


def metropolis_substep(state, j, partition, proposal, h, spec, potential, zeta,
                       constraints=None, metropolize=True, debug=False):
    """Propose a move of set ``j`` and accept it if ``zeta < min(1, exp(-beta dH))``.

    On rejection the set keeps its positions and its momenta are negated.

    Returns
    -------
    state : PhaseState
    accepted : bool
    delta_h : float
        ``inf`` for overlaps and non-finite proposals.
    failed : bool
        The RATTLE multiplier solve failed (counted as a rejection).
    """
    idx = partition.sets[j]
    failed = False
    try:
        proposed = _propose(state, j, idx, proposal, h, spec, potential, constraints)
        delta_h = local_energy_delta(state, proposed, idx, spec, potential)
        if debug:
            full = (potential.energy(proposed.q) - potential.energy(state.q)
                    + 0.5 * np.sum(proposed.p**2 / spec.masses[:, None])
                    - 0.5 * np.sum(state.p**2 / spec.masses[:, None]))
            if abs(full - delta_h) > 1e-8 * max(1.0, abs(full)):
                raise AssertionError(f"local dH {delta_h} != full dH {full}")
    except OverlapError:
        proposed, delta_h = None, math.inf
    except SolverFailure:
        proposed, delta_h, failed = None, math.inf, True
    if math.isnan(delta_h):
        delta_h = math.inf
    if not metropolize and proposed is not None:
        return proposed, True, delta_h, failed
    if proposed is not None and zeta < accept_probability(delta_h, spec.beta):
        return proposed, True, delta_h, failed
    if not metropolize:
        raise OverlapError("unpatched proposal hit a singular configuration")
    p = state.p.copy()
    p[idx] = -p[idx]
    return PhaseState(state.q.copy(), p), False, delta_h, failed


def metropolized_step(state, partition, proposal, h, spec, potential, ou_params, rng,
                      constraints=None, metropolize=True, debug=False):
    """One sweep over all sets in order, then one thermostat step.

    ``rng`` is an :class:`RngStream`; uniforms come from its ``metropolis``
    generator (one per set) and normals from ``thermostat``.
    """
    m = len(partition)
    zetas = rng.metropolis.random(m) if metropolize else np.zeros(m)
    accepted = np.zeros(m, dtype=bool)
    delta_h = np.zeros(m)
    probs = np.zeros(m)
    failures = 0
    for j in range(m):
        state, ok, dh, failed = metropolis_substep(
            state, j, partition, proposal, h, spec, potential, zetas[j],
            constraints, metropolize, debug)
        accepted[j] = ok
        delta_h[j] = dh
        probs[j] = accept_probability(dh, spec.beta)
        failures += failed
    xi = rng.thermostat.standard_normal(state.p.shape)
    if constraints is not None and isinstance(proposal, Rattle):
        state = constrained_ou_step(state, constraints, ou_params, None, xi=xi, tol=1e-8)
    else:
        state = ou_step(state, ou_params, None, xi=xi)
    return state, StepRecord(accepted, delta_h, probs, failures, zetas if metropolize else None)


def explicit_step(state, partition, proposal, h, spec, potential, ou_params, rng, constraints=None):
    """The unpatched splitting integrator: every proposal is taken."""
    return metropolized_step(state, partition, proposal, h, spec, potential, ou_params, rng,
                             constraints, metropolize=False)
