"""Experiment configuration: a flat ``key = value`` file with ``#`` comments.

Every key has a default that depends on the experiment; a file only needs to
list what differs. Unknown keys are rejected. List-valued keys take
comma-separated values.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, fields

EXPERIMENTS = ("autocorr_fluid", "scaling", "autocorr_dumbbell", "stationarity", "blowup_demo")
PARTITIONS = ("trivial", "per_particle", "per_dumbbell")
PROPOSALS = ("verlet", "respa", "rattle")
RICHARDSON_METHODS = ("coupled", "independent")


class ConfigError(ValueError):
    """Malformed or inconsistent configuration."""


@dataclass
class ExperimentConfig:
    """Parameters of one experiment run.

    ``box_length = 0`` means "derive from the density":
    ``(n_particles / density) ** (1 / dim)``. For ``autocorr_dumbbell`` the
    particle count is ``2 * n_dumbbells``.
    """

    experiment: str
    n_particles: int = 25
    n_dumbbells: int = 15
    dim: int = 2
    density: float = 0.8442
    box_length: float = 0.0
    temperature: float = 0.728
    gamma: float = 1.0
    mass: float = 1.0
    partition: tuple = ("trivial", "per_particle")
    proposal: str = "verlet"
    h: tuple = (0.005, 0.0025, 0.00125, 0.000625)
    h_fast: float = 0.0
    r_split: float = 1.5
    r_cut: float = 2.5
    samples: int = 10_000_000
    burn_in: int = 100_000
    t_corr: float = 1.0
    tau_spacing: float = 0.01
    richardson: str = "coupled"
    seed: int = 2024
    n_ladder: tuple = (27, 64, 125, 216, 512)
    rest_length: float = 1.0
    min_separation: tuple = (0.9, 0.8, 0.7)
    amplitude: float = 1.0
    n_bins: int = 50
    thin: int = 100
    energy_bound: float = 0.0
    blowup_threshold: float = 1e10
    step_log: int = 0

    @property
    def beta(self) -> float:
        return 1.0 / self.temperature

    @property
    def total_particles(self) -> int:
        return 2 * self.n_dumbbells if self.experiment == "autocorr_dumbbell" else self.n_particles

    def box_for(self, n_particles) -> float:
        if self.box_length > 0:
            return self.box_length
        return (n_particles / self.density) ** (1.0 / self.dim)

    def energy_bound_for(self, n_particles) -> float:
        return self.energy_bound if self.energy_bound > 0 else 100.0 * n_particles

    def validate(self) -> "ExperimentConfig":
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}; expected one of {EXPERIMENTS}")
        for name in ("n_particles", "n_dumbbells", "samples", "n_bins", "seed"):
            if getattr(self, name) < (0 if name == "seed" else 1):
                raise ConfigError(f"{name} must be positive")
        if self.dim not in (1, 2, 3):
            raise ConfigError("dim must be 1, 2 or 3")
        for name in ("density", "temperature", "mass", "r_cut", "t_corr", "tau_spacing",
                     "rest_length", "blowup_threshold"):
            value = getattr(self, name)
            if not (value > 0 and math.isfinite(value)):
                raise ConfigError(f"{name} must be positive and finite")
        for name in ("gamma", "box_length", "h_fast", "energy_bound", "amplitude", "r_split"):
            if not getattr(self, name) >= 0:
                raise ConfigError(f"{name} must be non-negative")
        for name in ("burn_in", "thin", "step_log"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if not self.h or any(not (x > 0 and math.isfinite(x)) for x in self.h):
            raise ConfigError("h must list positive step sizes")
        if not self.partition or any(k not in PARTITIONS for k in self.partition):
            raise ConfigError(f"partition must be drawn from {PARTITIONS}")
        if self.proposal not in PROPOSALS:
            raise ConfigError(f"proposal must be one of {PROPOSALS}")
        if self.proposal == "respa" and not 0 < self.h_fast <= min(self.h):
            raise ConfigError("respa needs 0 < h_fast <= h")
        if self.proposal == "respa" and not 0 < self.r_split < self.r_cut:
            raise ConfigError("respa needs 0 < r_split < r_cut")
        if self.richardson not in RICHARDSON_METHODS:
            raise ConfigError(f"richardson must be one of {RICHARDSON_METHODS}")
        if any(n < 1 for n in self.n_ladder):
            raise ConfigError("n_ladder entries must be positive")
        if not self.min_separation or any(s <= 0 for s in self.min_separation):
            raise ConfigError("min_separation entries must be positive")
        if self.experiment in ("autocorr_fluid", "autocorr_dumbbell"):
            self._validate_ladder()
        if self.experiment == "autocorr_dumbbell":
            if self.proposal != "rattle" or tuple(self.partition) != ("per_dumbbell",):
                raise ConfigError("autocorr_dumbbell needs proposal = rattle and partition = per_dumbbell")
            if not self.rest_length < 0.5 * self.box_for(self.total_particles):
                raise ConfigError("rest_length must be below half the box length")
        elif "per_dumbbell" in self.partition or self.proposal == "rattle":
            raise ConfigError("per_dumbbell partitions and rattle proposals need autocorr_dumbbell")
        if self.experiment == "scaling" and len(self.h) != 1:
            raise ConfigError("scaling uses a single step size")
        if self.experiment in ("stationarity", "blowup_demo") and len(self.h) != 1:
            raise ConfigError(f"{self.experiment} uses a single step size")
        if self.experiment == "stationarity" and self.n_particles != 1:
            raise ConfigError("stationarity runs a single particle")
        return self

    def _validate_ladder(self):
        for h in self.h:
            for span, label in ((self.t_corr, "t_corr"), (self.tau_spacing, "tau_spacing")):
                k = span / (2.0 * h)
                if abs(k - round(k)) > 1e-6 or round(k) < 1:
                    raise ConfigError(f"{label}={span} must be a multiple of 2h for h={h}")

    def echo(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out


_DEFAULTS = {
    "autocorr_fluid": {},
    "scaling": dict(dim=3, h=(0.01,), samples=100_000, burn_in=10_000, n_ladder=(27, 64, 125, 216, 512)),
    "autocorr_dumbbell": dict(density=0.998, temperature=3.0, r_cut=3.0, partition=("per_dumbbell",),
                              proposal="rattle", samples=1_000_000),
    "stationarity": dict(n_particles=1, dim=1, box_length=1.0, temperature=1.0, partition=("trivial",),
                         h=(0.05,), samples=10_000_000, burn_in=1000, amplitude=1.0, thin=100),
    "blowup_demo": dict(partition=("per_particle",), h=(0.1,), samples=1_000_000, burn_in=10_000,
                        energy_bound=1000.0, step_log=1000),
}

_LISTS = {"partition": str, "h": float, "n_ladder": int, "min_separation": float}


def _coerce(name, raw, kind):
    if name in _LISTS:
        items = [s.strip() for s in raw.split(",") if s.strip()]
        if not items:
            raise ConfigError(f"{name}: empty list")
        try:
            return tuple(_scalar(_LISTS[name], s) for s in items)
        except ValueError as exc:
            raise ConfigError(f"{name}: {exc}") from None
    try:
        return _scalar(kind, raw)
    except ValueError as exc:
        raise ConfigError(f"{name}: {exc}") from None


def _scalar(kind, raw):
    if kind is int:
        value = float(raw)
        if not value.is_integer():
            raise ValueError(f"expected an integer, got {raw!r}")
        return int(value)
    if kind is float:
        return float(raw)
    return raw


def parse_config(text: str, experiment: str | None = None) -> ExperimentConfig:
    """Parse config text. ``experiment`` (from the command line) must agree with the file if both are set."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = (lineno, raw)
    declared = values.pop("experiment", (0, None))[1]
    if experiment is None:
        experiment = declared
    elif declared is not None and declared != experiment:
        raise ConfigError(f"config is for {declared!r}, not {experiment!r}")
    if experiment not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {experiment!r}; expected one of {EXPERIMENTS}")
    types = {f.name: f.type for f in fields(ExperimentConfig)}
    kinds = {"int": int, "float": float, "str": str, "tuple": tuple}
    kw = dict(_DEFAULTS[experiment])
    for key, (lineno, raw) in values.items():
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        kw[key] = _coerce(key, raw, kinds[types[key]])
    return ExperimentConfig(experiment=experiment, **kw).validate()


def load_config(path, experiment=None) -> ExperimentConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    return parse_config(text, experiment)


def with_overrides(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    changes = {k: v for k, v in changes.items() if v is not None}
    return dataclasses.replace(cfg, **changes).validate()
