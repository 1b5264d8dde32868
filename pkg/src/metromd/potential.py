"""Potential-energy evaluators on the periodic box.

Every evaluator exposes the same small surface used by the integrators:
``energy(q)``, ``forces(q)`` and the set-restricted ``set_energy(q, idx)`` /
``set_forces(q, idx)``. ``set_energy`` sums only the terms that depend on the
particles in ``idx``, so differences of it equal differences of the total energy
whenever only those particles move.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

__all__ = [
    "OverlapError",
    "minimum_image",
    "minimum_image_distance",
    "lj_f",
    "LennardJones",
    "CosinePotential",
    "ZeroPotential",
    "PotentialSplit",
    "HamiltonianValue",
    "harmonic_test_potential",
    "kinetic_energy",
    "hamiltonian",
    "local_energy_delta",
    "cell_list_pairs",
]


class OverlapError(ArithmeticError):
    """Two interacting particles sit at zero separation."""


def minimum_image(dx, box_length: float) -> np.ndarray:
    """Componentwise nearest-image displacement."""
    dx = np.asarray(dx, dtype=float)
    return dx - box_length * np.round(dx / box_length)


def minimum_image_distance(q_i, q_j, box_length: float) -> float:
    return float(np.linalg.norm(minimum_image(np.subtract(q_i, q_j), box_length)))


def lj_f(r):
    """Untruncated Lennard-Jones form ``4 (r**-12 - r**-6)``."""
    inv6 = np.asarray(r, dtype=float) ** -6
    return 4.0 * (inv6 * inv6 - inv6)


def _lj_terms(r2):
    # energy f(r) and force magnitude over r, from squared distance
    inv2 = 1.0 / r2
    inv6 = inv2 * inv2 * inv2
    return 4.0 * (inv6 * inv6 - inv6), 24.0 * inv2 * (2.0 * inv6 * inv6 - inv6)


def cell_list_pairs(q, box_length: float, r_cut: float):
    """Candidate pairs ``(i, j)`` with ``i < j`` from a linked-cell decomposition.

    Returns every pair whose minimum-image distance can be below ``r_cut``. Falls
    back to all pairs when fewer than three cells fit along a side.
    """
    q = np.asarray(q, dtype=float)
    n, d = q.shape
    ncell = int(box_length // r_cut)
    if ncell < 3:
        return np.triu_indices(n, k=1)
    cell = np.minimum((q / (box_length / ncell)).astype(np.intp), ncell - 1)
    flat = np.ravel_multi_index(cell.T, (ncell,) * d)
    order = np.argsort(flat, kind="stable")
    counts = np.bincount(flat, minlength=ncell**d)
    starts = np.concatenate(([0], np.cumsum(counts)))
    members = [order[starts[c]:starts[c + 1]] for c in range(ncell**d)]
    ii, jj = [], []
    for c, coord in enumerate(itertools.product(range(ncell), repeat=d)):
        a = members[c]
        if len(a) == 0:
            continue
        for off in itertools.product((-1, 0, 1), repeat=d):
            nb = np.ravel_multi_index(
                tuple((np.add(coord, off)) % ncell), (ncell,) * d
            )
            if nb < c:
                continue
            b = members[nb]
            if len(b) == 0:
                continue
            if nb == c:
                i, j = np.triu_indices(len(a), k=1)
                ii.append(a[i])
                jj.append(a[j])
            else:
                i, j = np.meshgrid(a, b, indexing="ij")
                ii.append(i.ravel())
                jj.append(j.ravel())
    if not ii:
        return np.empty(0, np.intp), np.empty(0, np.intp)
    i = np.concatenate(ii)
    j = np.concatenate(jj)
    lo, hi = np.minimum(i, j), np.maximum(i, j)
    return lo, hi


class LennardJones:
    """Truncated and shifted Lennard-Jones pair potential with minimum image.

    ``band`` selects a piece of an exact fast/slow decomposition at ``r_split``:
    ``"fast"`` keeps the pair energy inside ``r_split`` (shifted to vanish there),
    ``"slow"`` keeps the remainder. ``fast + slow == full`` pairwise.

    Parameters
    ----------
    r_cut : float
        Cutoff distance; pair energy is exactly zero at and beyond it.
    box_length : float
        Side of the periodic box.
    exclude : iterable of (int, int), optional
        Particle pairs that do not interact (e.g. the two ends of a rigid bond).
    """

    def __init__(self, r_cut, box_length, exclude=(), band="full", r_split=None):
        if not r_cut > 0:
            raise ValueError("r_cut must be positive")
        if r_cut > box_length / 2:
            warnings.warn(
                f"r_cut={r_cut} exceeds half the box ({box_length / 2:.4g}); pair "
                "distances are taken at the nearest image only",
                stacklevel=2,
            )
        if band not in ("full", "fast", "slow"):
            raise ValueError(f"unknown band {band!r}")
        if band != "full" and not (r_split is not None and 0 < r_split < r_cut):
            raise ValueError("fast/slow bands need 0 < r_split < r_cut")
        self.r_cut = float(r_cut)
        self.box_length = float(box_length)
        self.shift = float(lj_f(self.r_cut))
        self.band = band
        self.r_split = None if r_split is None else float(r_split)
        self.exclude = frozenset(tuple(sorted(map(int, e))) for e in exclude)
        self._u_split = None if r_split is None else float(lj_f(r_split)) - self.shift

    def __repr__(self):
        return f"LennardJones(r_cut={self.r_cut}, box_length={self.box_length}, band={self.band!r})"

    def split(self, r_split):
        """Exact fast/slow decomposition for multiple-time-step proposals."""
        fast = LennardJones(self.r_cut, self.box_length, self.exclude, "fast", r_split)
        slow = LennardJones(self.r_cut, self.box_length, self.exclude, "slow", r_split)
        return PotentialSplit(fast, slow)

    def pair_energy(self, r):
        """Pair energy of the selected band at distance ``r``."""
        r = np.asarray(r, dtype=float)
        if np.any(r == 0):
            raise OverlapError("zero pair distance")
        return self._energy_r2(r * r)

    def _energy_r2(self, r2):
        e = np.zeros_like(r2)
        inside = r2 < self.r_cut**2
        e[inside] = _lj_terms(r2[inside])[0] - self.shift
        if self.band != "full":
            core = r2 < self.r_split**2
            if self.band == "fast":
                e = np.where(core, e - self._u_split, 0.0)
            else:
                e = np.where(core, self._u_split, e)
        return e

    def _force_r2(self, r2):
        # force magnitude divided by r
        lo = self.r_split**2 if self.band == "slow" else 0.0
        hi = self.r_split**2 if self.band == "fast" else self.r_cut**2
        w = np.zeros_like(r2)
        sel = (r2 < hi) & (r2 >= lo)
        w[sel] = _lj_terms(r2[sel])[1]
        return w

    def _mask(self, i, j):
        if not self.exclude:
            return np.ones(len(i), dtype=bool)
        lo, hi = np.minimum(i, j), np.maximum(i, j)
        return np.array([(a, b) not in self.exclude for a, b in zip(lo.tolist(), hi.tolist())], dtype=bool)

    def _displacements(self, q, i, j):
        dx = minimum_image(q[i] - q[j], self.box_length)
        r2 = np.einsum("ij,ij->i", dx, dx)
        if np.any(r2 == 0):
            raise OverlapError("zero pair distance")
        return dx, r2

    def _all_pairs(self, q, method):
        n = len(q)
        if method == "cells":
            i, j = cell_list_pairs(q, self.box_length, self.r_cut)
        else:
            i, j = np.triu_indices(n, k=1)
        keep = self._mask(i, j)
        return i[keep], j[keep]

    def energy(self, q, method="direct"):
        """Total energy over all pairs; ``method="cells"`` uses a linked-cell search."""
        q = np.asarray(q, dtype=float)
        i, j = self._all_pairs(q, method)
        if len(i) == 0:
            return 0.0
        _, r2 = self._displacements(q, i, j)
        return float(np.sum(self._energy_r2(r2)))

    def forces(self, q):
        q = np.asarray(q, dtype=float)
        n = len(q)
        f = np.zeros_like(q)
        i, j = self._all_pairs(q, "direct")
        if len(i) == 0:
            return f
        dx, r2 = self._displacements(q, i, j)
        fij = self._force_r2(r2)[:, None] * dx
        np.add.at(f, i, fij)
        np.add.at(f, j, -fij)
        return f

    def _set_pairs(self, q, idx):
        n = len(q)
        idx = np.asarray(idx, dtype=np.intp)
        inside = np.zeros(n, dtype=bool)
        inside[idx] = True
        i = np.repeat(idx, n)
        j = np.tile(np.arange(n), len(idx))
        # pairs inside the set appear twice; keep each once (i < j) for energy
        keep = (i != j) & (~inside[j] | (i < j))
        keep &= self._mask(i, j)
        return i[keep], j[keep], inside

    def set_energy(self, q, idx):
        q = np.asarray(q, dtype=float)
        i, j, _ = self._set_pairs(q, idx)
        if len(i) == 0:
            return 0.0
        _, r2 = self._displacements(q, i, j)
        return float(np.sum(self._energy_r2(r2)))

    def set_forces(self, q, idx):
        """Forces on the particles of ``idx`` (rows follow ``idx`` order)."""
        q = np.asarray(q, dtype=float)
        idx = np.asarray(idx, dtype=np.intp)
        n = len(q)
        i = np.repeat(idx, n)
        j = np.tile(np.arange(n), len(idx))
        row = np.repeat(np.arange(len(idx)), n)
        keep = (i != j) & self._mask(i, j)
        i, j, row = i[keep], j[keep], row[keep]
        out = np.zeros((len(idx), q.shape[1]))
        if len(i) == 0:
            return out
        dx, r2 = self._displacements(q, i, j)
        np.add.at(out, row, self._force_r2(r2)[:, None] * dx)
        return out


class CosinePotential:
    """Smooth periodic test potential ``A * sum(1 - cos(2 pi q / L))`` over all coordinates."""

    def __init__(self, box_length, amplitude=1.0):
        self.box_length = float(box_length)
        self.amplitude = float(amplitude)
        self.k = 2.0 * np.pi / self.box_length

    def __repr__(self):
        return f"CosinePotential(box_length={self.box_length}, amplitude={self.amplitude})"

    def energy(self, q):
        return float(np.sum(self.amplitude * (1.0 - np.cos(self.k * np.asarray(q)))))

    def forces(self, q):
        return -self.amplitude * self.k * np.sin(self.k * np.asarray(q, dtype=float))

    def set_energy(self, q, idx):
        return self.energy(np.asarray(q)[np.asarray(idx)])

    def set_forces(self, q, idx):
        return self.forces(np.asarray(q)[np.asarray(idx)])


class ZeroPotential:
    """``U = 0``; free flight."""

    def energy(self, q):
        return 0.0

    def forces(self, q):
        return np.zeros_like(np.asarray(q, dtype=float))

    def set_energy(self, q, idx):
        return 0.0

    def set_forces(self, q, idx):
        return np.zeros((len(idx), np.shape(q)[1]))


@dataclass(frozen=True)
class PotentialSplit:
    """Fast/slow decomposition ``U = U_fast + U_slow`` for multiple-time-step proposals."""

    fast: object
    slow: object

    def energy(self, q):
        return self.fast.energy(q) + self.slow.energy(q)

    def forces(self, q):
        return self.fast.forces(q) + self.slow.forces(q)

    def set_energy(self, q, idx):
        return self.fast.set_energy(q, idx) + self.slow.set_energy(q, idx)

    def set_forces(self, q, idx):
        return self.fast.set_forces(q, idx) + self.slow.set_forces(q, idx)


class HamiltonianValue(NamedTuple):
    kinetic: float
    potential: float
    total: float


def harmonic_test_potential(q, box_length=1.0):
    """Value and derivative of ``1 - cos(2 pi q / L)`` for one particle in 1-D."""
    k = 2.0 * np.pi / box_length
    q = float(np.ravel(q)[0])
    return 1.0 - np.cos(k * q), k * np.sin(k * q)


def kinetic_energy(p, masses) -> float:
    p = np.asarray(p, dtype=float)
    return float(0.5 * np.sum(p * p / np.asarray(masses, dtype=float)[:, None]))


def hamiltonian(state, spec, potential) -> HamiltonianValue:
    kin = kinetic_energy(state.p, spec.masses)
    pot = potential.energy(state.q)
    return HamiltonianValue(kin, pot, kin + pot)


def local_energy_delta(state_before, state_after, changed_set, spec, potential) -> float:
    """``H(after) - H(before)`` from the terms touching ``changed_set`` only."""
    idx = np.asarray(changed_set, dtype=np.intp)
    m = spec.masses[idx]
    dkin = kinetic_energy(state_after.p[idx], m) - kinetic_energy(state_before.p[idx], m)
    dpot = potential.set_energy(state_after.q, idx) - potential.set_energy(state_before.q, idx)
    return dkin + dpot
