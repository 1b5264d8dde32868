"""Experiment runners. Each writes CSV files and a manifest into an output directory.

Independent legs of an experiment (one per step size, partition or system
size) get their own random stream derived from ``(seed, leg key)``, so
results do not depend on the order in which legs run or on how many run at
once.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .. import __version__
from ..chain import run_chain, run_coupled
from ..constraints import ConstraintSet, place_dumbbells
from ..integrate import Rattle, Respa, Verlet
from ..model import Partition, PhaseState, RngStream, SystemSpec, lattice_init, sample_maxwell
from ..observe import AutocorrEstimate, fit_loglog_slope, gibbs_bin_probabilities, gibbs_expectation, richardson_error
from ..potential import CosinePotential, LennardJones
from .config import ExperimentConfig

logger = logging.getLogger(__name__)

__all__ = [
    "RunReport",
    "InvariantViolation",
    "leg_seed",
    "run_experiment",
    "run_autocorr_fluid",
    "run_scaling",
    "run_autocorr_dumbbell",
    "run_stationarity",
    "run_blowup_demo",
]

CONSTRAINT_TOL = 1e-10


class InvariantViolation(RuntimeError):
    """A Metropolized chain broke a property that must always hold."""


@dataclass
class RunReport:
    experiment: str
    out_dir: Path
    results: dict
    outputs: list = field(default_factory=list)
    violations: list = field(default_factory=list)
    wall_clock_s: float = 0.0

    @property
    def ok(self) -> bool:
        return not self.violations


def leg_seed(seed, *key) -> int:
    """64-bit seed for one leg, derived from the run seed and a leg label."""
    words = [zlib.crc32(str(k).encode()) for k in key]
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(words))
    return int(ss.generate_state(1, np.uint64)[0])


def _git_blob_hash(path) -> str:
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _write_manifest(report: RunReport, cfg: ExperimentConfig):
    manifest = {
        "experiment": report.experiment,
        "version": __version__,
        "config": cfg.echo(),
        "wall_clock_s": round(report.wall_clock_s, 3),
        "outputs": {Path(p).name: _git_blob_hash(p) for p in report.outputs},
        "violations": report.violations,
        "results": report.results,
    }
    path = report.out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, default=_json_default) + "\n")
    return path


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def _map_legs(fn, legs, jobs):
    """Run ``fn`` on every leg; results keyed by leg, independent of completion order."""
    if jobs <= 1 or len(legs) <= 1:
        return {leg: fn(leg) for leg in legs}
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = {leg: pool.submit(fn, leg) for leg in legs}
        return {leg: futures[leg].result() for leg in legs}


def _h_label(h) -> str:
    return f"{h:.6g}"


def _proposal(cfg):
    if cfg.proposal == "respa":
        return Respa(cfg.h_fast)
    if cfg.proposal == "rattle":
        return Rattle()
    return Verlet()


def _lj(cfg, box, exclude=()):
    lj = LennardJones(cfg.r_cut, box, exclude=exclude)
    return lj.split(cfg.r_split) if cfg.proposal == "respa" else lj


# ---------------------------------------------------------------- fluid legs

def _fluid_system(cfg, n):
    box = cfg.box_for(n)
    spec = SystemSpec.uniform(n, cfg.dim, box, cfg.beta, cfg.gamma, cfg.mass)
    return spec, _lj(cfg, box)


def _autocorr_leg(cfg, kind, h, coupled, system):
    """One step size of a correlation ladder; returns plain data for merging."""
    spec, potential, partition, constraints, state0, seed = system(cfg, kind, h)
    rng = RngStream(seed)
    proposal = _proposal(cfg)
    t0 = time.perf_counter()
    state = state0(rng)
    burn = run_chain(state, spec, partition, proposal, h, potential, rng, cfg.burn_in,
                     constraints=constraints)
    est = AutocorrEstimate(h, cfg.t_corr, spec.dof, tau_spacing=cfg.tau_spacing)
    leg = dict(partition=kind, h=h, burn=_chain_summary(burn))
    if coupled:
        n_origins = max(2, int(round(cfg.samples * h / cfg.t_corr)))
        res = run_coupled(burn.state, spec, partition, proposal, h, potential, rng, n_origins,
                          t_corr=cfg.t_corr, tau_spacing=cfg.tau_spacing,
                          constraints=constraints, autocorr=est)
        leg.update(
            steps=res.steps, origins=n_origins,
            accept=res.fine.mean_accept_per_particle,
            accept_coarse=res.coarse.mean_accept_per_particle,
            failures=res.failures + burn.failures, max_abs_energy=res.max_abs_energy,
            max_constraint=max(res.max_constraint, burn.max_constraint),
            max_tangency=max(res.max_tangency, burn.max_tangency),
            dA=res.difference.values, dA_stderr=res.difference.stderr,
        )
    else:
        n_steps = cfg.samples + len(est.ring) - 1
        res = run_chain(burn.state, spec, partition, proposal, h, potential, rng, n_steps,
                        constraints=constraints, autocorr=est)
        leg.update(
            steps=res.steps, accept=res.stats.mean_accept_per_particle,
            failures=res.failures + burn.failures, max_abs_energy=res.max_abs_energy,
            max_constraint=max(res.max_constraint, burn.max_constraint),
            max_tangency=max(res.max_tangency, burn.max_tangency),
        )
    leg.update(taus=est.taus, A=est.values, count=est.count, seconds=time.perf_counter() - t0)
    return leg


def _chain_summary(res):
    return dict(steps=res.steps, accept=res.stats.mean_accept_per_particle, failures=res.failures,
                max_abs_energy=res.max_abs_energy)


def _fluid_setup(cfg, kind, h):
    n = cfg.n_particles
    spec, potential = _fluid_system(cfg, n)
    partition = Partition.from_kind(kind, n)

    def state0(rng):
        return PhaseState(lattice_init(spec), sample_maxwell(spec, rng))

    return spec, potential, partition, None, state0, leg_seed(cfg.seed, kind, _h_label(h))


def _dumbbell_setup(cfg, kind, h):
    n = cfg.total_particles
    box = cfg.box_for(n)
    spec = SystemSpec.uniform(n, cfg.dim, box, cfg.beta, cfg.gamma, cfg.mass)
    constraints = ConstraintSet.dumbbells(cfg.n_dumbbells, cfg.rest_length, box)
    potential = LennardJones(cfg.r_cut, box, exclude=constraints.exclusions())
    partition = Partition.per_dumbbell(cfg.n_dumbbells)

    def state0(rng):
        q = _place(cfg, box, rng)
        return PhaseState(*constraints.project_to_manifold(q, sample_maxwell(spec, rng), spec))

    return spec, potential, partition, constraints, state0, leg_seed(cfg.seed, kind, _h_label(h))


def _place(cfg, box, rng):
    last = None
    for sep in cfg.min_separation:
        try:
            return place_dumbbells(cfg.n_dumbbells, cfg.rest_length, box, cfg.dim, rng.init,
                                   min_separation=sep)
        except RuntimeError as exc:
            last = exc
            logger.info("dumbbell placement failed at separation %g; relaxing", sep)
    raise InvariantViolation(f"could not place {cfg.n_dumbbells} dumbbells: {last}")


def _ladder_legs(cfg):
    """(partition, h) legs. Separate runs also need the chain at twice the largest h."""
    hs = sorted(set(cfg.h), reverse=True)
    if cfg.richardson == "independent":
        hs = [2.0 * hs[0]] + hs
    return [(kind, h) for kind in cfg.partition for h in hs]


def _correlation_experiment(cfg, out_dir, jobs, setup, constrained):
    t0 = time.perf_counter()
    coupled = cfg.richardson == "coupled"
    legs = _ladder_legs(cfg)
    data = _map_legs(_LegTask(cfg, coupled, setup), legs, jobs)
    report = RunReport(cfg.experiment, out_dir, {})
    h_ladder = sorted(set(cfg.h), reverse=True)
    h_ref = h_ladder[-1]
    per_partition = {}
    for kind in cfg.partition:
        ref = (data[(kind, h_ref)]["taus"], data[(kind, h_ref)]["A"])
        eps = {}
        for h in h_ladder:
            leg = data[(kind, h)]
            path = out_dir / f"autocorr_{kind}_h{_h_label(h)}.csv"
            _write_curve(path, "tau,A_h", leg["taus"], leg["A"])
            report.outputs.append(path)
            if coupled:
                taus = leg["taus"]
                dpath = out_dir / f"difference_{kind}_h{_h_label(h)}.csv"
                _write_curve(dpath, "tau,dA,stderr", taus, leg["dA"], leg["dA_stderr"])
                report.outputs.append(dpath)
                eps[h] = float(np.max(np.abs(leg["dA"])) / np.max(np.abs(ref[1])))
            else:
                coarse = data[(kind, 2.0 * h)]
                eps[h] = richardson_error((leg["taus"], leg["A"]), (coarse["taus"], coarse["A"]), ref)
        if coupled is False:
            path = out_dir / f"autocorr_{kind}_h{_h_label(2.0 * h_ladder[0])}.csv"
            leg = data[(kind, 2.0 * h_ladder[0])]
            _write_curve(path, "tau,A_h", leg["taus"], leg["A"])
            report.outputs.append(path)
        pts = [(h, e) for h, e in eps.items()]
        slope = fit_loglog_slope(pts) if len(pts) >= 2 and all(e > 0 for _, e in pts) else float("nan")
        per_partition[kind] = dict(
            eps={_h_label(h): e for h, e in eps.items()}, slope=slope,
            accept={_h_label(h): data[(kind, h)]["accept"] for h in h_ladder},
        )
    for key, leg in data.items():
        kind, h = key
        where = f"{kind} h={_h_label(h)}"
        bound = cfg.energy_bound_for(cfg.total_particles)
        if not math.isfinite(leg["burn"]["max_abs_energy"]):
            report.violations.append(f"{where}: non-finite energy during burn-in")
        if not (leg["max_abs_energy"] <= bound):
            report.violations.append(f"{where}: |H| reached {leg['max_abs_energy']:.4g} (bound {bound:g})")
        if leg["failures"]:
            report.violations.append(f"{where}: {leg['failures']} constraint solver failures")
        if constrained and max(leg["max_constraint"], leg["max_tangency"]) > CONSTRAINT_TOL:
            report.violations.append(
                f"{where}: constraint residual {leg['max_constraint']:.3g}, "
                f"tangency residual {leg['max_tangency']:.3g}")
    rpath = out_dir / "richardson.csv"
    with open(rpath, "w") as fh:
        fh.write("partition_kind,h,eps_h\n")
        for kind in cfg.partition:
            for h in h_ladder:
                fh.write(f"{kind},{_h_label(h)},{per_partition[kind]['eps'][_h_label(h)]:.8g}\n")
    report.outputs.append(rpath)
    report.results = dict(
        richardson=cfg.richardson, h_reference=h_ref, partitions=per_partition,
        legs={f"{k}/{_h_label(h)}": _leg_brief(v, constrained) for (k, h), v in data.items()},
    )
    report.wall_clock_s = time.perf_counter() - t0
    return report


def _leg_brief(leg, constrained):
    out = dict(steps=leg["steps"], samples=leg["count"], accept=leg["accept"], failures=leg["failures"],
               max_abs_energy=leg["max_abs_energy"], seconds=round(leg["seconds"], 2))
    if "origins" in leg:
        out.update(origins=leg["origins"], accept_coarse=leg["accept_coarse"])
    if constrained:
        out.update(max_constraint=leg["max_constraint"], max_tangency=leg["max_tangency"])
    return out


class _LegTask:
    """Picklable leg callable for the process pool."""

    def __init__(self, cfg, coupled, setup):
        self.cfg, self.coupled, self.setup = cfg, coupled, setup

    def __call__(self, leg):
        kind, h = leg
        return _autocorr_leg(self.cfg, kind, h, self.coupled, self.setup)


def _write_curve(path, header, *columns):
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for row in zip(*columns):
            fh.write(",".join(f"{v:.12g}" for v in row) + "\n")


def run_autocorr_fluid(cfg: ExperimentConfig, out_dir, jobs=1) -> RunReport:
    """Momentum autocorrelation ladder of the Lennard-Jones fluid and its Richardson errors."""
    return _correlation_experiment(cfg, Path(out_dir), jobs, _fluid_setup, constrained=False)


def run_autocorr_dumbbell(cfg: ExperimentConfig, out_dir, jobs=1) -> RunReport:
    """The same ladder for rigid dumbbells with per-dumbbell RATTLE moves."""
    return _correlation_experiment(cfg, Path(out_dir), jobs, _dumbbell_setup, constrained=True)


# ---------------------------------------------------------------- scaling

def _scaling_leg(args):
    cfg, kind, n = args
    spec, potential = _fluid_system(cfg, n)
    partition = Partition.from_kind(kind, n)
    rng = RngStream(leg_seed(cfg.seed, kind, n))
    h = cfg.h[0]
    t0 = time.perf_counter()
    state = PhaseState(lattice_init(spec), sample_maxwell(spec, rng))
    burn = run_chain(state, spec, partition, _proposal(cfg), h, potential, rng, cfg.burn_in)
    res = run_chain(burn.state, spec, partition, _proposal(cfg), h, potential, rng, cfg.samples,
                    record_steps=cfg.step_log > 0)
    return dict(n=n, partition=kind, accept=res.stats.mean_accept_per_particle,
                accept_fraction=res.stats.accept_fraction, steps=res.steps,
                max_abs_energy=res.max_abs_energy, burn_finite=math.isfinite(burn.max_abs_energy),
                records=_head(res.records, cfg.step_log), seconds=time.perf_counter() - t0)


def _head(records, k):
    if not records or k <= 0:
        return None
    return {key: v[:k] for key, v in records.items()}


def run_scaling(cfg: ExperimentConfig, out_dir, jobs=1) -> RunReport:
    """Mean acceptance probability per particle against system size."""
    t0 = time.perf_counter()
    out_dir = Path(out_dir)
    legs = [(kind, n) for kind in cfg.partition for n in cfg.n_ladder]
    data = _map_legs(_ScalingTask(cfg), legs, jobs)
    report = RunReport(cfg.experiment, out_dir, {})
    path = out_dir / "acceptance.csv"
    with open(path, "w") as fh:
        fh.write("n_particles,partition_kind,mean_accept_per_particle\n")
        for kind, n in legs:
            fh.write(f"{n},{kind},{data[(kind, n)]['accept']:.12g}\n")
    report.outputs.append(path)
    slopes = {}
    for kind in cfg.partition:
        pts = [(n, data[(kind, n)]["accept"]) for n in cfg.n_ladder]
        slopes[kind] = fit_loglog_slope(pts) if len(pts) >= 2 and all(a > 0 for _, a in pts) else float("nan")
    for (kind, n), leg in data.items():
        bound = cfg.energy_bound_for(n)
        if not (leg["max_abs_energy"] <= bound and leg["burn_finite"]):
            report.violations.append(f"{kind} n={n}: |H| reached {leg['max_abs_energy']:.4g} (bound {bound:g})")
        if leg["records"] is not None:
            report.outputs.append(_write_records(out_dir / f"steps_{kind}_n{n}.csv", leg["records"]))
    report.results = dict(
        h=cfg.h[0], slopes=slopes,
        legs={f"{k}/{n}": dict(accept=v["accept"], accept_fraction=v["accept_fraction"],
                                steps=v["steps"], seconds=round(v["seconds"], 2))
              for (k, n), v in data.items()},
    )
    report.wall_clock_s = time.perf_counter() - t0
    return report


class _ScalingTask:
    def __init__(self, cfg):
        self.cfg = cfg

    def __call__(self, leg):
        return _scaling_leg((self.cfg, *leg))


def _write_records(path, records, first_step=0):
    with open(path, "w") as fh:
        fh.write("step,n_accepted,mean_delta_h,failures\n")
        for k, (a, d, f) in enumerate(zip(records["n_accepted"], records["mean_delta_h"], records["failures"])):
            fh.write(f"{first_step + k},{int(a)},{d:.10g},{int(f)}\n")
    return path


# ---------------------------------------------------------------- stationarity

def run_stationarity(cfg: ExperimentConfig, out_dir, jobs=1) -> RunReport:
    """Ergodic averages of one particle on a smooth periodic potential against quadrature.

    Positions are binned after thinning by ``thin`` steps so that the
    chi-square test sees nearly independent draws.
    """
    t0 = time.perf_counter()
    out_dir = Path(out_dir)
    box = cfg.box_for(1)
    spec = SystemSpec.uniform(1, cfg.dim, box, cfg.beta, cfg.gamma, cfg.mass)
    potential = CosinePotential(box, cfg.amplitude)
    partition = Partition.from_kind(cfg.partition[0], 1)
    rng = RngStream(leg_seed(cfg.seed, "stationarity"))
    h = cfg.h[0]
    rng_init = rng.init
    state = PhaseState(rng_init.uniform(0.0, box, (1, cfg.dim)), sample_maxwell(spec, rng))
    burn = run_chain(state, spec, partition, _proposal(cfg), h, potential, rng, cfg.burn_in)
    thin = max(cfg.thin, 1)
    res = run_chain(burn.state, spec, partition, _proposal(cfg), h, potential, rng, cfg.samples,
                    thin=thin, record_steps=cfg.step_log > 0)
    report = RunReport(cfg.experiment, out_dir, {})

    def u1(x):
        return cfg.amplitude * (1.0 - np.cos(potential.k * np.asarray(x)))

    q = res.samples_q.ravel()
    probs = gibbs_bin_probabilities(u1, box, cfg.beta, cfg.n_bins)
    counts, _ = np.histogram(q, bins=cfg.n_bins, range=(0.0, box))
    expected = probs * len(q)
    chi2 = float(np.sum((counts - expected) ** 2 / expected))
    p_value = float(stats.chi2.sf(chi2, cfg.n_bins - 1))
    cos_q = np.cos(potential.k * q)
    cos_exact = gibbs_expectation(lambda x: math.cos(potential.k * x), u1, box, cfg.beta)
    cos_se = float(np.std(cos_q, ddof=1) / math.sqrt(len(cos_q)))
    var_exact = cfg.mass / cfg.beta
    p2 = res.moments["p2"]
    hist_path = out_dir / "histogram.csv"
    _write_curve(hist_path, "bin_left,count,expected", np.linspace(0.0, box, cfg.n_bins + 1)[:-1],
                 counts, expected)
    report.outputs.append(hist_path)
    if res.records is not None:
        report.outputs.append(_write_records(out_dir / "steps.csv", _head(res.records, cfg.step_log)))
    report.results = dict(
        h=h, steps=res.steps, samples=len(q), chi2=chi2, dof=cfg.n_bins - 1, p_value=p_value,
        momentum_variance=p2, momentum_variance_exact=var_exact,
        momentum_variance_rel_error=abs(p2 - var_exact) / var_exact,
        cos_mean=float(cos_q.mean()), cos_exact=cos_exact, cos_stderr=cos_se,
        cos_z=float(abs(cos_q.mean() - cos_exact) / cos_se) if cos_se > 0 else float("inf"),
        accept=res.stats.mean_accept_per_particle,
    )
    report.wall_clock_s = time.perf_counter() - t0
    return report


# ---------------------------------------------------------------- blow-up demo

def run_blowup_demo(cfg: ExperimentConfig, out_dir, jobs=1) -> RunReport:
    """Unpatched splitting integrator against the Metropolized one at a large step size."""
    t0 = time.perf_counter()
    out_dir = Path(out_dir)
    n = cfg.n_particles
    spec, potential = _fluid_system(cfg, n)
    partition = Partition.from_kind(cfg.partition[0], n)
    h = cfg.h[0]
    report = RunReport(cfg.experiment, out_dir, {})
    # both chains start from the same equilibrium sample of the patched chain
    rng = RngStream(leg_seed(cfg.seed, "burn_in"))
    state = PhaseState(lattice_init(spec), sample_maxwell(spec, rng))
    burn = run_chain(state, spec, partition, _proposal(cfg), h, potential, rng, cfg.burn_in)
    if not math.isfinite(burn.max_abs_energy):
        raise InvariantViolation("patched burn-in produced a non-finite energy")
    legs = {}
    for label, patched in (("unpatched", False), ("patched", True)):
        rng = RngStream(leg_seed(cfg.seed, label))
        res = run_chain(burn.state, spec, partition, _proposal(cfg), h, potential, rng, cfg.samples,
                        metropolize=patched, record_steps=cfg.step_log > 0,
                        blowup_threshold=cfg.blowup_threshold)
        legs[label] = res
        if res.records is not None:
            recs = res.records
            if not patched:
                # keep the steps leading up to the blow-up
                start = max(0, res.steps - cfg.step_log)
                recs = {k: v[start:] for k, v in recs.items()}
                path = _write_records(out_dir / f"steps_{label}.csv", recs, start)
            else:
                path = _write_records(out_dir / f"steps_{label}.csv", _head(recs, cfg.step_log))
            report.outputs.append(path)
    un, pa = legs["unpatched"], legs["patched"]
    bound = cfg.energy_bound_for(n)
    report.results = dict(
        h=h, partition=partition.kind,
        unpatched_blew_up=un.blowup_step is not None,
        unpatched_blowup_step=un.blowup_step,
        patched_steps=pa.steps,
        patched_max_abs_energy=pa.max_abs_energy,
        patched_max_energy=pa.max_energy,
        patched_accept=pa.stats.mean_accept_per_particle,
        patched_accept_fraction=pa.stats.accept_fraction,
        energy_bound=bound,
    )
    if not pa.max_abs_energy < bound or pa.steps < cfg.samples:
        report.violations.append(f"patched chain: |H| reached {pa.max_abs_energy:.4g} (bound {bound:g})")
    report.wall_clock_s = time.perf_counter() - t0
    return report


# ---------------------------------------------------------------- dispatch

RUNNERS = {
    "autocorr_fluid": run_autocorr_fluid,
    "scaling": run_scaling,
    "autocorr_dumbbell": run_autocorr_dumbbell,
    "stationarity": run_stationarity,
    "blowup_demo": run_blowup_demo,
}


def run_experiment(cfg: ExperimentConfig, out_dir, jobs=1) -> RunReport:
    """Run ``cfg.experiment`` and write its manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = RUNNERS[cfg.experiment](cfg, out_dir, jobs=jobs)
    report.outputs.append(_write_manifest(report, cfg))
    return report
