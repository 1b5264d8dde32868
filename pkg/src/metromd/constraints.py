"""Rigid-bond (dumbbell) holonomic constraints on the periodic box."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import wrap_position
from .potential import minimum_image

__all__ = [
    "ConstraintError",
    "DumbbellConstraint",
    "ConstraintSet",
    "place_dumbbells",
]


class ConstraintError(ValueError):
    """A state is off the constraint manifold, or a bond is degenerate."""


@dataclass(frozen=True)
class DumbbellConstraint:
    """``g(q) = |(q_a - q_b) mod L|^2 - l0^2`` for the particle pair ``(a, b)``."""

    a: int
    b: int
    rest_length: float
    box_length: float

    def __post_init__(self):
        if not 0 < self.rest_length < self.box_length / 2:
            raise ValueError("rest length must lie in (0, box_length / 2)")
        if self.a == self.b:
            raise ValueError("a dumbbell needs two distinct particles")

    def bond(self, q):
        return minimum_image(q[self.a] - q[self.b], self.box_length)

    def value(self, q) -> float:
        r = self.bond(q)
        return float(r @ r - self.rest_length**2)

    def gradient(self, q):
        """Rows: gradient with respect to particle ``a`` then ``b``."""
        r = self.bond(q)
        return np.stack([2.0 * r, -2.0 * r])


class ConstraintSet:
    """One scalar constraint per partition set; particles belong to at most one bond."""

    def __init__(self, constraints):
        self.constraints = tuple(constraints)
        seen = set()
        for c in self.constraints:
            if c.a in seen or c.b in seen:
                raise ValueError("each particle may appear in at most one constraint")
            seen.update((c.a, c.b))

    def __len__(self):
        return len(self.constraints)

    def __iter__(self):
        return iter(self.constraints)

    def __getitem__(self, j):
        return self.constraints[j]

    @classmethod
    def dumbbells(cls, n_dumbbells, rest_length, box_length):
        return cls(
            DumbbellConstraint(2 * k, 2 * k + 1, rest_length, box_length)
            for k in range(n_dumbbells)
        )

    def exclusions(self):
        """Bonded pairs, which carry no pair interaction."""
        return [(c.a, c.b) for c in self.constraints]

    def constraint_value(self, q) -> np.ndarray:
        return np.array([c.value(q) for c in self.constraints])

    def constraint_gradient(self, q) -> list:
        return [c.gradient(q) for c in self.constraints]

    def velocity_residual(self, q, p, masses) -> np.ndarray:
        """``grad g^T M^-1 p`` per constraint."""
        out = np.empty(len(self.constraints))
        for k, c in enumerate(self.constraints):
            r = c.bond(q)
            out[k] = 2.0 * r @ (p[c.a] / masses[c.a] - p[c.b] / masses[c.b])
        return out

    def check(self, q, p, masses, tol):
        g = np.max(np.abs(self.constraint_value(q)), initial=0.0)
        v = np.max(np.abs(self.velocity_residual(q, p, masses)), initial=0.0)
        if g > tol or v > tol:
            raise ConstraintError(f"state off the manifold: |g|={g:.3g}, |dg M^-1 p|={v:.3g}")

    def project_to_manifold(self, q_raw, p_raw, spec):
        """Rescale each bond about its midpoint to the rest length and make momenta tangent.

        The momentum projection removes the component along ``grad g`` in the
        ``M^-1`` metric: ``p <- p - grad g (grad g^T M^-1 grad g)^-1 grad g^T M^-1 p``.
        """
        q = np.array(q_raw, dtype=float)
        p = np.array(p_raw, dtype=float)
        masses = spec.masses
        for c in self.constraints:
            r = c.bond(q)
            length = np.sqrt(r @ r)
            if length == 0:
                raise ConstraintError(f"degenerate bond ({c.a}, {c.b})")
            if abs(length - c.rest_length) > 0:
                mid = q[c.b] + 0.5 * r
                half = 0.5 * c.rest_length * r / length
                q[c.a] = mid + half
                q[c.b] = mid - half
        q = wrap_position(q, spec.box_length)
        for c in self.constraints:
            grad = c.gradient(q)
            minv = np.array([1.0 / masses[c.a], 1.0 / masses[c.b]])[:, None]
            block = p[[c.a, c.b]]
            lam = np.sum(grad * minv * block) / np.sum(grad * minv * grad)
            p[[c.a, c.b]] = block - lam * grad
        return q, p


def place_dumbbells(n_dumbbells, rest_length, box_length, dim, rng, min_separation=0.9, max_tries=100000):
    """Random non-overlapping dumbbell placement.

    Each dumbbell gets a uniform centre and orientation; a candidate is rejected
    if any of its ends lies closer than ``min_separation`` to an existing particle.
    """
    q = np.empty((2 * n_dumbbells, dim))
    placed = 0
    tries = 0
    while placed < n_dumbbells:
        tries += 1
        if tries > max_tries:
            raise RuntimeError("could not place dumbbells without overlap; lower the density")
        centre = rng.uniform(0, box_length, dim)
        u = rng.standard_normal(dim)
        u /= np.linalg.norm(u)
        ends = wrap_position(np.stack([centre + 0.5 * rest_length * u, centre - 0.5 * rest_length * u]), box_length)
        if placed:
            dx = minimum_image(ends[:, None, :] - q[None, : 2 * placed, :], box_length)
            if np.min(np.sum(dx * dx, axis=-1)) < min_separation**2:
                continue
        q[2 * placed: 2 * placed + 2] = ends
        placed += 1
    return q
