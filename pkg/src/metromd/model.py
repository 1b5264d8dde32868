"""Core domain types: system parameters, phase-space state, partitions and RNG streams."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "SystemSpec",
    "PhaseState",
    "Partition",
    "RngStream",
    "NoiseTape",
    "wrap_position",
    "sample_maxwell",
    "lattice_init",
]


@dataclass(frozen=True)
class SystemSpec:
    """Static description of a periodic molecular system.

    Masses are per particle; the mass matrix is diagonal with the same entry
    on every coordinate of a given particle.
    """

    n_particles: int
    dim: int
    box_length: float
    masses: np.ndarray
    beta: float
    gamma: float

    def __post_init__(self):
        masses = np.broadcast_to(
            np.asarray(self.masses, dtype=float), (self.n_particles,)
        ).copy()
        masses.setflags(write=False)
        object.__setattr__(self, "masses", masses)
        if self.n_particles < 1:
            raise ValueError("n_particles must be >= 1")
        if self.dim not in (1, 2, 3):
            raise ValueError("dim must be 1, 2 or 3")
        if not self.box_length > 0:
            raise ValueError("box_length must be positive")
        if np.any(masses <= 0):
            raise ValueError("masses must be positive")
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")

    @classmethod
    def uniform(cls, n_particles, dim, box_length, beta, gamma, mass=1.0):
        return cls(n_particles, dim, float(box_length), np.full(n_particles, mass), beta, gamma)

    @property
    def dof(self) -> int:
        """Total number of configurational degrees of freedom."""
        return self.n_particles * self.dim


@dataclass
class PhaseState:
    """Positions (wrapped into the box) and momenta, both of shape ``(n, d)``."""

    q: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        self.q = np.array(self.q, dtype=float, ndmin=2)
        self.p = np.array(self.p, dtype=float, ndmin=2)
        if self.q.shape != self.p.shape:
            raise ValueError(f"shape mismatch: q{self.q.shape} vs p{self.p.shape}")

    def copy(self) -> "PhaseState":
        return PhaseState(self.q.copy(), self.p.copy())

    def flipped(self) -> "PhaseState":
        return PhaseState(self.q.copy(), -self.p)


@dataclass(frozen=True)
class Partition:
    """Ordered, disjoint groups of particle indices swept in a fixed order."""

    sets: tuple
    kind: str = "custom"

    def __post_init__(self):
        sets = tuple(np.asarray(s, dtype=np.intp).ravel() for s in self.sets)
        object.__setattr__(self, "sets", sets)
        if any(len(s) == 0 for s in sets):
            raise ValueError("partition sets must be non-empty")

    def __len__(self):
        return len(self.sets)

    def validate(self, n_particles: int) -> None:
        """Raise ``ValueError`` unless every particle appears in exactly one set."""
        flat = np.concatenate(self.sets)
        counts = np.bincount(flat, minlength=n_particles)
        if flat.min() < 0 or len(counts) != n_particles or np.any(counts != 1):
            raise ValueError("partition must cover every particle exactly once")

    def as_csr(self):
        """Return ``(ptr, idx)`` arrays describing the sets in compressed form."""
        ptr = np.zeros(len(self.sets) + 1, dtype=np.intp)
        ptr[1:] = np.cumsum([len(s) for s in self.sets])
        return ptr, np.concatenate(self.sets).astype(np.intp)

    @classmethod
    def trivial(cls, n_particles: int) -> "Partition":
        return cls((np.arange(n_particles),), kind="trivial")

    @classmethod
    def per_particle(cls, n_particles: int) -> "Partition":
        return cls(tuple([i] for i in range(n_particles)), kind="per_particle")

    @classmethod
    def per_dumbbell(cls, n_dumbbells: int) -> "Partition":
        """Dumbbell ``k`` owns particles ``2k`` and ``2k + 1``."""
        return cls(tuple([2 * k, 2 * k + 1] for k in range(n_dumbbells)), kind="per_dumbbell")

    @classmethod
    def from_kind(cls, kind: str, n_particles: int) -> "Partition":
        if kind == "trivial":
            return cls.trivial(n_particles)
        if kind == "per_particle":
            return cls.per_particle(n_particles)
        if kind == "per_dumbbell":
            if n_particles % 2:
                raise ValueError("per_dumbbell partition needs an even particle count")
            return cls.per_dumbbell(n_particles // 2)
        raise ValueError(f"unknown partition kind {kind!r}")


# Fixed sub-stream numbering; changing it breaks reproducibility of stored runs.
_PURPOSES = {"init": 0, "thermostat": 1, "metropolis": 2}


@dataclass
class RngStream:
    """Seeded random source split into independent per-purpose generators.

    Each purpose gets its own PCG64 generator derived from
    ``SeedSequence(seed, spawn_key=(k,))`` with ``k`` fixed per purpose:
    ``init`` (0) for initial conditions, ``thermostat`` (1) for Ornstein-Uhlenbeck
    noise and ``metropolis`` (2) for accept/reject uniforms. Identical seeds give
    identical draws regardless of how the draws are chunked.
    """

    seed: int
    init: np.random.Generator = field(init=False, repr=False)
    thermostat: np.random.Generator = field(init=False, repr=False)
    metropolis: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        self.seed = int(self.seed) & 0xFFFFFFFFFFFFFFFF
        for name, key in _PURPOSES.items():
            seq = np.random.SeedSequence(self.seed, spawn_key=(key,))
            setattr(self, name, np.random.Generator(np.random.PCG64(seq)))


class _Tape:
    def __init__(self, values):
        self._flat = np.ascontiguousarray(values, dtype=float).ravel()
        self._pos = 0

    def _take(self, size):
        n = int(np.prod(size))
        if self._pos + n > len(self._flat):
            raise IndexError("noise tape exhausted")
        out = self._flat[self._pos:self._pos + n].reshape(size)
        self._pos += n
        return out

    random = _take
    standard_normal = _take

    @property
    def remaining(self):
        return len(self._flat) - self._pos


class NoiseTape:
    """Pre-drawn uniforms and normals played back through the :class:`RngStream` interface.

    A chain driven by a tape consumes ``uniforms`` row by row (one row of ``m``
    values per sweep) and ``normals`` row by row (one row of ``nu`` values per
    thermostat step). Used to run two chains on a common noise path.
    """

    def __init__(self, uniforms, normals):
        self.metropolis = _Tape(uniforms)
        self.thermostat = _Tape(normals)


def wrap_position(q_raw, box_length: float) -> np.ndarray:
    """Map coordinates into ``[0, box_length)``."""
    if not box_length > 0:
        raise ValueError("box_length must be positive")
    q = np.mod(np.asarray(q_raw, dtype=float), box_length)
    # fmod rounding can return exactly box_length for tiny negative inputs
    return np.where(q >= box_length, q - box_length, q)


def sample_maxwell(spec: SystemSpec, rng) -> np.ndarray:
    """Draw momenta from the Maxwell distribution, variance ``m_i / beta`` per component."""
    gen = rng.init if isinstance(rng, RngStream) else rng
    std = np.sqrt(spec.masses / spec.beta)[:, None]
    return std * gen.standard_normal((spec.n_particles, spec.dim))


def _grid_side(n: int, dim: int) -> int:
    k = max(1, int(round(n ** (1.0 / dim))))
    while k**dim < n:
        k += 1
    while k > 1 and (k - 1) ** dim >= n:
        k -= 1
    return k


def lattice_init(spec: SystemSpec) -> np.ndarray:
    """Place particles on the vertices of a square/cubic grid filling the box.

    The grid has ``ceil(n**(1/d))`` sites per side with spacing ``box_length / side``;
    the first ``n`` sites in lexicographic order are occupied.
    """
    side = _grid_side(spec.n_particles, spec.dim)
    spacing = spec.box_length / side
    sites = itertools.islice(itertools.product(range(side), repeat=spec.dim), spec.n_particles)
    return np.array(list(sites), dtype=float).reshape(spec.n_particles, spec.dim) * spacing
