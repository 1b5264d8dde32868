"""Exact-in-law Ornstein-Uhlenbeck momentum flows (Langevin thermostat part)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import PhaseState, RngStream
from .constraints import ConstraintError

__all__ = [
    "OUParams",
    "ou_step",
    "projection_matrix",
    "constrained_ou_step",
    "euler_maruyama_ou",
]


@dataclass(frozen=True)
class OUParams:
    """Per-particle decay ``exp(-gamma h / m)`` and noise std for one thermostat step.

    The noise variance per component, ``(m / beta) (1 - exp(-2 gamma h / m))``,
    is the integrated variance of the stochastic convolution over one step.
    """

    gamma: float
    beta: float
    h: float
    masses: np.ndarray
    decay: np.ndarray
    noise_std: np.ndarray

    @classmethod
    def build(cls, gamma, beta, h, masses):
        if gamma < 0 or not beta > 0 or not h > 0:
            raise ValueError("need gamma >= 0, beta > 0, h > 0")
        masses = np.asarray(masses, dtype=float)
        c = gamma * h / masses
        decay = np.exp(-c)
        # -expm1 keeps precision when gamma h / m is tiny
        noise_std = np.sqrt(masses / beta * -np.expm1(-2.0 * c))
        return cls(float(gamma), float(beta), float(h), masses, decay, noise_std)

    @classmethod
    def from_spec(cls, spec, h):
        return cls.build(spec.gamma, spec.beta, h, spec.masses)


def _normals(rng, shape):
    gen = rng.thermostat if isinstance(rng, RngStream) else rng
    return gen.standard_normal(shape)


def ou_step(state: PhaseState, params: OUParams, rng, xi=None) -> PhaseState:
    """Exact OU update ``p <- exp(-gamma h / m) p + eta``; positions untouched.

    ``xi`` may supply the standard normals directly (shape of ``p``).
    """
    if xi is None:
        xi = _normals(rng, state.p.shape)
    p = params.decay[:, None] * state.p + params.noise_std[:, None] * xi
    return PhaseState(state.q.copy(), p)


def projection_matrix(grad, masses) -> np.ndarray:
    """``I - G (G^T M^-1 G)^-1 G^T M^-1`` for a flattened constraint gradient ``G``.

    ``masses`` holds one entry per coordinate of ``G``.
    """
    g = np.ravel(grad)
    minv = 1.0 / np.asarray(masses, dtype=float)
    denom = g @ (minv * g)
    if denom == 0:
        raise ConstraintError("degenerate constraint gradient")
    return np.eye(len(g)) - np.outer(g, minv * g) / denom


def constrained_ou_step(state, constraints, params: OUParams, rng, xi=None, tol=1e-8):
    """Projected OU flow on each constrained set.

    Needs equal masses within a set, where ``exp(-c P) = I + (exp(-c) - 1) P``
    and the noise covariance is ``(m / beta)(1 - exp(-2c)) P``.
    """
    masses = params.masses
    g = constraints.constraint_value(state.q)
    v = constraints.velocity_residual(state.q, state.p, masses)
    if g.size and (np.max(np.abs(g)) > tol or np.max(np.abs(v)) > tol):
        raise ConstraintError(
            f"state off the manifold on entry: |g|={np.max(np.abs(g)):.3g}, "
            f"|dg M^-1 p|={np.max(np.abs(v)):.3g}"
        )
    if xi is None:
        xi = _normals(rng, state.p.shape)
    p = state.p.copy()
    constrained = np.zeros(len(p), dtype=bool)
    for c in constraints:
        pair = [c.a, c.b]
        if masses[c.a] != masses[c.b]:
            raise ValueError("constrained OU step needs equal masses within a set")
        constrained[pair] = True
        proj = projection_matrix(c.gradient(state.q), np.repeat(masses[pair], p.shape[1]))
        decay, std = params.decay[c.a], params.noise_std[c.a]
        block = p[pair].ravel()
        block = block + (decay - 1.0) * (proj @ block) + std * (proj @ xi[pair].ravel())
        p[pair] = block.reshape(2, -1)
    free = ~constrained
    p[free] = params.decay[free, None] * p[free] + params.noise_std[free, None] * xi[free]
    return PhaseState(state.q.copy(), p)


def euler_maruyama_ou(p0, gamma, beta, mass, h, n_sub, rng):
    """Fine-step Euler-Maruyama integration of ``dp = -gamma p / m dt + sqrt(2 gamma / beta) dW``.

    Used as an independent check of the closed-form update.
    """
    p = np.array(p0, dtype=float)
    dt = h / n_sub
    amp = np.sqrt(2.0 * gamma / beta * dt)
    for _ in range(n_sub):
        p = p - gamma / mass * p * dt + amp * rng.standard_normal(p.shape)
    return p
