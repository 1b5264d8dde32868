"""Metropolis-patched explicit integrators for Langevin molecular dynamics."""

from .chain import HAVE_COMPILED, ChainResult, run_chain
from .constraints import ConstraintSet, DumbbellConstraint
from .integrate import (
    Rattle,
    Respa,
    StepRecord,
    Verlet,
    accept_probability,
    explicit_step,
    metropolis_substep,
    metropolized_step,
    rattle_substep,
    respa_substep,
    verlet_substep,
)
from .model import NoiseTape, PhaseState, Partition, RngStream, SystemSpec, lattice_init, sample_maxwell, wrap_position
from .observe import AcceptanceStats, AutocorrEstimate, fit_loglog_slope, richardson_error
from .potential import CosinePotential, LennardJones, PotentialSplit, ZeroPotential, hamiltonian
from .thermostat import OUParams, constrained_ou_step, ou_step

__version__ = "0.1.0"
