"""Long-chain driver with a compiled inner loop and a pure-Python fallback.

The compiled extension ``metromd._kernels`` is used when it imports and the
system is one it knows (Lennard-Jones, its fast/slow split, the cosine test
potential, free particles). Otherwise, or when ``METROMD_BACKEND=python`` is
set, the loop runs step by step through :func:`metromd.integrate.metropolized_step`.
Both paths draw the same random numbers in the same order.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .constraints import ConstraintSet
from .integrate import Rattle, Respa, StepRecord, Verlet, metropolized_step
from .model import NoiseTape, PhaseState, RngStream
from .observe import AcceptanceStats, AutocorrEstimate, CoupledDifference
from .potential import CosinePotential, LennardJones, OverlapError, PotentialSplit, ZeroPotential, kinetic_energy
from .thermostat import OUParams

try:
    from . import _kernels
except ImportError:  # pragma: no cover - depends on the build
    _kernels = None

logger = logging.getLogger(__name__)

__all__ = ["HAVE_COMPILED", "ChainResult", "CoupledResult", "run_chain", "run_coupled", "default_backend"]

HAVE_COMPILED = _kernels is not None


def default_backend() -> str:
    env = os.environ.get("METROMD_BACKEND", "").lower()
    if env in ("python", "compiled"):
        return env
    return "compiled" if HAVE_COMPILED else "python"


@dataclass
class ChainResult:
    state: PhaseState
    stats: AcceptanceStats
    steps: int
    potential_energy: float
    failures: int = 0
    overlaps: int = 0
    blowup_step: int | None = None
    max_abs_energy: float = 0.0
    max_energy: float = -np.inf
    max_constraint: float = 0.0
    max_tangency: float = 0.0
    samples_q: np.ndarray | None = None
    samples_p: np.ndarray | None = None
    moments: dict = field(default_factory=dict)
    records: dict | None = None
    backend: str = "python"


def _kernel_potential(potential, proposal):
    """Kernel parameter dict for ``potential``, or ``None`` if unsupported."""
    if isinstance(potential, PotentialSplit):
        fast, slow = potential.fast, potential.slow
        if not (isinstance(fast, LennardJones) and isinstance(slow, LennardJones)
                and fast.band == "fast" and slow.band == "slow" and fast.r_split == slow.r_split
                and fast.r_cut == slow.r_cut and fast.exclude == slow.exclude):
            return None
        base = dict(kind=1, box=fast.box_length, r_cut=fast.r_cut, shift=fast.shift,
                    r_split=fast.r_split), fast.exclude
        return base if isinstance(proposal, (Respa, Verlet)) else None
    if isinstance(proposal, Respa):
        return None
    if isinstance(potential, LennardJones) and potential.band == "full":
        return dict(kind=1, box=potential.box_length, r_cut=potential.r_cut,
                    shift=potential.shift), potential.exclude
    if isinstance(potential, CosinePotential):
        return dict(kind=2, box=potential.box_length, amplitude=potential.amplitude), frozenset()
    if isinstance(potential, ZeroPotential):
        return dict(kind=0, box=1.0), frozenset()
    return None


def _partner_array(n, exclude, constraints):
    partner = np.full(n, -1, dtype=np.intp)
    pairs = set(exclude)
    if constraints is not None:
        pairs |= {tuple(sorted((c.a, c.b))) for c in constraints}
    for a, b in pairs:
        if partner[a] != -1 or partner[b] != -1:
            return None
        partner[a], partner[b] = b, a
    return partner


def run_chain(state, spec, partition, proposal, h, potential, rng: RngStream, n_steps, *,
              constraints: ConstraintSet | None = None, metropolize=True,
              autocorr: AutocorrEstimate | None = None, skip=0, thin=0,
              record_steps=False, blowup_threshold=1e10, backend=None, chunk=4096):
    """Advance a chain ``n_steps`` steps.

    Parameters
    ----------
    skip : int
        Steps at the start whose momenta are not fed to ``autocorr`` and not sampled.
    thin : int
        Keep every ``thin``-th post-``skip`` state in ``samples_q`` / ``samples_p`` (0: none).
    record_steps : bool
        Keep per-step accept counts, mean energy changes and solver failures.
    metropolize : bool
        ``False`` runs the unpatched integrator; it stops once ``|H|`` exceeds
        ``blowup_threshold`` or becomes non-finite and reports ``blowup_step``.
    """
    backend = backend or default_backend()
    ou = OUParams.from_spec(spec, h)
    kpot = _kernel_potential(potential, proposal)
    partner = None
    if kpot is not None:
        partner = _partner_array(spec.n_particles, kpot[1], constraints)
    if isinstance(proposal, Rattle) and partition.kind != "per_dumbbell":
        partner = None
    if backend == "compiled" and (not HAVE_COMPILED or kpot is None or partner is None):
        if not HAVE_COMPILED:
            logger.warning("compiled kernels unavailable; using the Python loop")
        backend = "python"
    if backend == "compiled":
        return _run_compiled(state, spec, partition, proposal, h, kpot[0], partner, ou, rng,
                             n_steps, constraints, metropolize, autocorr, skip, thin,
                             record_steps, blowup_threshold, chunk, potential)
    return _run_python(state, spec, partition, proposal, h, potential, ou, rng, n_steps,
                       constraints, metropolize, autocorr, skip, thin, record_steps,
                       blowup_threshold)


def _n_samples(n_steps, skip, thin):
    if thin <= 0 or n_steps <= skip:
        return 0
    return (n_steps - skip - 1) // thin + 1


def _run_python(state, spec, partition, proposal, h, potential, ou, rng, n_steps, constraints,
                metropolize, autocorr, skip, thin, record_steps, blowup_threshold):
    stats = AcceptanceStats.empty(partition)
    n_keep = _n_samples(n_steps, skip, thin)
    q_out = np.zeros((n_keep, spec.dof))
    p_out = np.zeros((n_keep, spec.dof))
    rec = {"n_accepted": [], "mean_delta_h": [], "failures": []} if record_steps else None
    u = potential.energy(state.q)
    failures = overlaps = written = 0
    max_abs = 0.0
    max_h = -np.inf
    max_g = max_v = 0.0
    blowup = None
    obs = np.zeros(6)
    cosine = isinstance(potential, CosinePotential)
    steps = 0
    for step in range(n_steps):
        try:
            state, record = metropolized_step(state, partition, proposal, h, spec, potential, ou,
                                              rng, constraints, metropolize)
        except OverlapError:
            blowup = step
            max_abs = max_h = np.inf
            steps += 1
            break
        stats.update(record)
        failures += record.failures
        overlaps += int(np.sum(np.isinf(record.delta_h))) - record.failures
        u = potential.energy(state.q)
        energy = kinetic_energy(state.p, spec.masses) + u
        p2 = state.p**2
        obs[0] += p2.sum()
        obs[1] += (p2 * p2).sum()
        obs[2] += spec.dof
        if cosine:
            cq = np.cos(potential.k * state.q)
            obs[3] += cq.sum()
            obs[4] += (cq * cq).sum()
            obs[5] += spec.dof
        max_abs = max(max_abs, abs(energy)) if np.isfinite(energy) else np.inf
        max_h = max(max_h, energy) if np.isfinite(energy) else np.inf
        if isinstance(proposal, Rattle) and constraints is not None:
            max_g = max(max_g, np.max(np.abs(constraints.constraint_value(state.q))))
            max_v = max(max_v, np.max(np.abs(constraints.velocity_residual(state.q, state.p, spec.masses))))
        if rec is not None:
            finite = record.delta_h[np.isfinite(record.delta_h)]
            rec["n_accepted"].append(int(record.accepted.sum()))
            rec["mean_delta_h"].append(float(finite.mean()) if finite.size else np.inf)
            rec["failures"].append(record.failures)
        steps += 1
        if step >= skip:
            if autocorr is not None:
                autocorr.push(state.p)
            if thin > 0 and (step - skip) % thin == 0:
                q_out[written] = state.q.ravel()
                p_out[written] = state.p.ravel()
                written += 1
        if not metropolize and (not np.isfinite(energy) or abs(energy) > blowup_threshold):
            blowup = step
            break
    return ChainResult(
        state=state, stats=stats, steps=steps, potential_energy=u, failures=failures,
        overlaps=overlaps, blowup_step=blowup, max_abs_energy=max_abs, max_energy=max_h,
        max_constraint=max_g, max_tangency=max_v, samples_q=q_out[:written],
        samples_p=p_out[:written], moments=_moments(obs),
        records={k: np.asarray(v) for k, v in rec.items()} if rec is not None else None,
        backend="python",
    )


def _moments(obs):
    out = {}
    if obs[2] > 0:
        out["p2"] = obs[0] / obs[2]
        out["p4"] = obs[1] / obs[2]
    if obs[5] > 0:
        out["cos"] = obs[3] / obs[5]
        out["cos2"] = obs[4] / obs[5]
    return out


def _prop_args(proposal, h, constraints):
    if isinstance(proposal, Verlet):
        return dict(kind=0, h=h)
    if isinstance(proposal, Respa):
        return dict(kind=1, h=h, h_fast=proposal.h_fast, n_fast=proposal.n_fast(h))
    if isinstance(proposal, Rattle):
        lengths = {c.rest_length for c in constraints}
        if len(lengths) != 1:
            raise ValueError("compiled RATTLE needs one common rest length")
        return dict(kind=2, h=h, tol=proposal.tol, max_iter=proposal.max_iter,
                    rest_length=lengths.pop())
    raise TypeError(f"unknown proposal {proposal!r}")


def _run_compiled(state, spec, partition, proposal, h, pot_args, partner, ou, rng, n_steps,
                  constraints, metropolize, autocorr, skip, thin, record_steps,
                  blowup_threshold, chunk, potential):
    q = np.ascontiguousarray(state.q, dtype=float).copy()
    p = np.ascontiguousarray(state.p, dtype=float).copy()
    masses = np.ascontiguousarray(spec.masses, dtype=float)
    ptr, idx = partition.as_csr()
    m = len(partition)
    stats = AcceptanceStats.empty(partition)
    counters = np.array([0, 0, -1, 0, 0], dtype=np.int_)
    scalars = np.array([potential.energy(q), 0.0, 0.0, 0.0, -np.inf])
    obs = np.zeros(6)
    n_keep = _n_samples(n_steps, skip, thin)
    q_out = np.zeros((n_keep, spec.dof))
    p_out = np.zeros((n_keep, spec.dof))
    if autocorr is not None:
        ring, lags, sums, ring_state = autocorr.ring, autocorr.lags, autocorr.sums, autocorr.ring_state
    else:
        ring = np.zeros((0, spec.dof))
        lags = np.zeros(0, dtype=np.intp)
        sums = np.zeros(0)
        ring_state = np.zeros(3, dtype=np.int_)
    rec = None
    if record_steps:
        rec = {"n_accepted": np.zeros(n_steps, dtype=np.int_),
               "mean_delta_h": np.zeros(n_steps), "failures": np.zeros(n_steps, dtype=np.int_)}
    constrained_ou = isinstance(proposal, Rattle)
    prop_args = _prop_args(proposal, h, constraints)
    empty_i = np.zeros(0, dtype=np.int_)
    empty_d = np.zeros(0)
    done = 0
    while done < n_steps:
        k = min(chunk, n_steps - done)
        uniforms = rng.metropolis.random((k, m)) if metropolize else np.zeros((k, m))
        normals = rng.thermostat.standard_normal((k, spec.dof))
        if rec is not None:
            ra, rd, rf = (rec["n_accepted"][done:done + k], rec["mean_delta_h"][done:done + k],
                          rec["failures"][done:done + k])
        else:
            ra, rd, rf = empty_i, empty_d, empty_i
        taken = _kernels.run_chain(
            q, p, masses, ptr, idx, partner, pot_args, prop_args, spec.beta, ou.decay,
            ou.noise_std, constrained_ou, uniforms, normals, metropolize, stats.prob_sums,
            stats.accepted, counters, scalars, ring, lags, sums, ring_state,
            done, skip, q_out, p_out, thin, obs, ra, rd, rf,
            blowup_threshold,
        )
        done += taken
        if counters[2] >= 0:
            break
    stats.steps = int(counters[1])
    written = int(counters[4])
    blowup = int(counters[2]) if counters[2] >= 0 else None
    if rec is not None:
        rec = {key: v[:done] for key, v in rec.items()}
    return ChainResult(
        state=PhaseState(q, p), stats=stats, steps=done,
        potential_energy=float(scalars[0]), failures=int(counters[0]), overlaps=int(counters[3]),
        blowup_step=blowup, max_abs_energy=float(scalars[1]), max_energy=float(scalars[4]),
        max_constraint=float(scalars[2]), max_tangency=float(scalars[3]),
        samples_q=q_out[:written], samples_p=p_out[:written], moments=_moments(obs),
        records=rec, backend="compiled",
    )


@dataclass
class CoupledResult:
    """Outcome of :func:`run_coupled`; ``fine`` and ``coarse`` aggregate the two chains."""

    state: PhaseState
    difference: CoupledDifference
    fine: AcceptanceStats
    coarse: AcceptanceStats
    steps: int
    failures: int = 0
    overlaps: int = 0
    max_abs_energy: float = 0.0
    max_constraint: float = 0.0
    max_tangency: float = 0.0


def _stride(spacing, h):
    k = int(round(spacing / h))
    if k < 1 or abs(k * h - spacing) > 1e-9 * max(1.0, spacing):
        raise ValueError(f"lag spacing {spacing} is not a multiple of {h}")
    return k


def run_coupled(state, spec, partition, proposal, h, potential, rng: RngStream, n_origins, *,
                t_corr=1.0, tau_spacing=None, constraints=None, autocorr=None, backend=None):
    """Estimate ``A^h - A^2h`` on ``[0, t_corr]`` with coupled h / 2h chain pairs.

    The h-chain runs continuously for ``n_origins`` segments of ``t_corr / h``
    steps, fed from ``rng`` exactly as :func:`run_chain` would feed it (so its
    path, and ``autocorr`` if given, match a plain run). At the start of every
    segment a 2h-chain branches off the current state. Its uniforms are the
    h-chain's uniforms of every other step, and its Gaussian increments are
    built from each pair of h-chain increments so that both thermostats see
    the same Brownian path: with ``c = exp(-gamma h / m)`` and per-step
    standard deviations ``s_h``, ``s_2h``,
    ``xi_2h = (c s_h xi_1 + s_h xi_2) / s_2h`` is again standard normal.

    ``state`` should already be equilibrated. Lags are multiples of
    ``tau_spacing`` (default ``2 h``).
    """
    n_seg = int(round(t_corr / h))
    if n_seg % 2 or abs(n_seg * h - t_corr) > 1e-9 * max(1.0, t_corr):
        raise ValueError("t_corr must be an even multiple of h")
    spacing = 2.0 * h if tau_spacing is None else float(tau_spacing)
    stride_h = _stride(spacing, h)
    stride_2h = _stride(spacing, 2.0 * h)
    n_lags = n_seg // stride_h
    diff = CoupledDifference(h, np.arange(n_lags + 1) * spacing)
    ou_h = OUParams.from_spec(spec, h)
    ou_2h = OUParams.from_spec(spec, 2.0 * h)
    a = (ou_h.decay * ou_h.noise_std / ou_2h.noise_std)[None, :, None]
    b = (ou_h.noise_std / ou_2h.noise_std)[None, :, None]
    m = len(partition)
    n, dim = spec.n_particles, spec.dim
    fine = AcceptanceStats.empty(partition)
    coarse = AcceptanceStats.empty(partition)
    out = CoupledResult(state, diff, fine, coarse, 0)
    d = np.zeros(n_lags + 1)
    for _ in range(n_origins):
        uniforms = rng.metropolis.random((n_seg, m))
        normals = rng.thermostat.standard_normal((n_seg, spec.dof))
        xi = normals.reshape(n_seg // 2, 2, n, dim)
        normals_2h = a * xi[:, 0] + b * xi[:, 1]
        p0 = state.p.ravel().copy()
        kw = dict(constraints=constraints, thin=1, backend=backend)
        r_h = run_chain(state, spec, partition, proposal, h, potential,
                        NoiseTape(uniforms, normals), n_seg, autocorr=autocorr, **kw)
        r_2h = run_chain(state, spec, partition, proposal, 2.0 * h, potential,
                         NoiseTape(uniforms[1::2], normals_2h), n_seg // 2, **kw)
        # row k of samples_p is the state after k + 1 steps
        p_h = r_h.samples_p[stride_h - 1::stride_h]
        p_2h = r_2h.samples_p[stride_2h - 1::stride_2h]
        d[1:] = (p_h - p_2h) @ p0
        diff.add(d)
        for res, acc in ((r_h, fine), (r_2h, coarse)):
            acc.prob_sums += res.stats.prob_sums
            acc.accepted += res.stats.accepted
            acc.steps += res.stats.steps
            out.failures += res.failures
            out.overlaps += res.overlaps
            out.max_abs_energy = max(out.max_abs_energy, res.max_abs_energy)
            out.max_constraint = max(out.max_constraint, res.max_constraint)
            out.max_tangency = max(out.max_tangency, res.max_tangency)
        out.steps += r_h.steps
        state = r_h.state
    out.state = state
    return out
