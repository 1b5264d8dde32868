"""Estimators and diagnostics: momentum autocorrelation, Richardson error, acceptance statistics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate

__all__ = [
    "AutocorrEstimate",
    "AcceptanceStats",
    "richardson_error",
    "CoupledDifference",
    "fit_loglog_slope",
    "gibbs_expectation",
    "gibbs_bin_probabilities",
    "momentum_moment",
]


def _lag_grid(h, t_corr, tau_spacing=None):
    n_max = int(math.floor(t_corr / h + 1e-9))
    if tau_spacing is None:
        return np.arange(n_max + 1)
    stride = int(round(tau_spacing / h))
    if stride < 1 or abs(stride * h - tau_spacing) > 1e-9 * max(1.0, tau_spacing):
        raise ValueError(f"tau_spacing={tau_spacing} is not a multiple of h={h}")
    return np.arange(0, n_max + 1, stride)


class AutocorrEstimate:
    """On-the-fly estimate of ``A(tau) = <P(t + tau) . P(t)>`` on a lag grid ``tau_k = k h``.

    Momenta are pushed one step at a time into a ring buffer holding the last
    ``max_lag + 1`` of them. Once the buffer is full, every push adds the dot
    product of the newest momentum with the one ``k`` steps back for every lag
    ``k``, so all lags share the same sample count.

    Parameters
    ----------
    h : float
        Time between pushed momenta.
    t_corr : float
        Longest lag time.
    dof : int
        Length of a flattened momentum vector.
    tau_spacing : float, optional
        Evaluate only lags that are multiples of this time (a multiple of ``h``).
    """

    def __init__(self, h, t_corr, dof, tau_spacing=None, lags=None):
        self.h = float(h)
        self.t_corr = float(t_corr)
        self.dof = int(dof)
        self.lags = np.ascontiguousarray(
            _lag_grid(h, t_corr, tau_spacing) if lags is None else lags, dtype=np.intp
        )
        self.sums = np.zeros(len(self.lags))
        # head, filled, count; shared with the compiled loop
        self.ring_state = np.zeros(3, dtype=np.int_)
        self.ring = np.zeros((int(self.lags.max()) + 1, self.dof))

    @property
    def taus(self):
        return self.lags * self.h

    @property
    def count(self) -> int:
        return int(self.ring_state[2])

    @property
    def values(self):
        if self.count == 0:
            raise ValueError("no samples accumulated")
        return self.sums / self.count

    def push(self, p):
        """Add one momentum vector (the next in time)."""
        head, filled, _ = self.ring_state
        size = len(self.ring)
        self.ring[head] = np.ravel(p)
        filled += 1
        if filled >= size:
            rows = (head - self.lags) % size
            self.sums += self.ring[rows] @ self.ring[head]
            self.ring_state[2] += 1
        self.ring_state[0] = (head + 1) % size
        self.ring_state[1] = filled

    def accumulate_window(self, window):
        """Add the products of the newest momentum with its predecessors.

        ``window`` holds at least ``max_lag + 1`` consecutive momenta, oldest first.
        """
        window = np.reshape(window, (len(window), -1))
        if len(window) < len(self.ring):
            raise ValueError("window shorter than the longest lag")
        newest = window[-1]
        self.sums += window[len(window) - 1 - self.lags] @ newest
        self.ring_state[2] += 1

    def merge(self, other: "AutocorrEstimate") -> "AutocorrEstimate":
        """Pool two estimates on the same grid (sums and counts add)."""
        if not (np.array_equal(self.lags, other.lags) and self.h == other.h):
            raise ValueError("estimates live on different lag grids")
        out = AutocorrEstimate(self.h, self.t_corr, self.dof, lags=self.lags)
        out.sums = self.sums + other.sums
        out.ring_state[2] = self.count + other.count
        return out

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("tau,A_h\n")
            for tau, a in zip(self.taus, self.values):
                fh.write(f"{tau:.10g},{a:.12g}\n")

    @staticmethod
    def read_csv(path):
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return data[:, 0], data[:, 1]


@dataclass
class AcceptanceStats:
    """Running acceptance statistics of the Metropolis sweep.

    ``prob_sums`` accumulates ``min(1, exp(-beta dH))`` per set; ``accepted``
    counts accepted proposals per set.
    """

    set_sizes: np.ndarray
    prob_sums: np.ndarray
    accepted: np.ndarray
    steps: int = 0

    @classmethod
    def empty(cls, partition):
        m = len(partition)
        return cls(np.array([len(s) for s in partition.sets]), np.zeros(m), np.zeros(m, dtype=np.int_))

    def update(self, record):
        self.prob_sums += record.accept_prob
        self.accepted += record.accepted
        self.steps += 1

    @property
    def mean_prob_per_set(self):
        return self.prob_sums / max(self.steps, 1)

    @property
    def accept_rate_per_set(self):
        return self.accepted / max(self.steps, 1)

    @property
    def mean_accept_per_particle(self) -> float:
        """Mean acceptance probability seen by a particle, weighting sets by size."""
        w = self.set_sizes / self.set_sizes.sum()
        return float(w @ self.mean_prob_per_set)

    @property
    def accept_fraction(self) -> float:
        """Accepted substeps over attempted substeps."""
        return float(self.accepted.sum() / max(self.steps * len(self.accepted), 1))


def _as_curve(est):
    if isinstance(est, AutocorrEstimate):
        return est.taus, est.values
    taus, vals = est
    return np.asarray(taus, dtype=float), np.asarray(vals, dtype=float)


def richardson_error(a_h, a_2h, a_ref) -> float:
    """Relative Richardson error ``sup |A^h - A^2h| / sup |A_ref|`` over shared lags.

    Each argument is an :class:`AutocorrEstimate` or a ``(taus, values)`` pair.
    """
    t1, v1 = _as_curve(a_h)
    t2, v2 = _as_curve(a_2h)
    _, vr = _as_curve(a_ref)
    k1 = np.round(t1 * 1e9).astype(np.int64)
    k2 = np.round(t2 * 1e9).astype(np.int64)
    common, i1, i2 = np.intersect1d(k1, k2, return_indices=True)
    if len(common) == 0:
        raise ValueError("estimates share no lag")
    denom = np.max(np.abs(vr))
    if denom == 0:
        raise ValueError("reference estimate is identically zero")
    return float(np.max(np.abs(v1[i1] - v2[i2])) / denom)


def fit_loglog_slope(points) -> float:
    """Least-squares slope of ``log y`` against ``log x``."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[0] < 2:
        raise ValueError("need at least two (x, y) points")
    if np.any(pts <= 0):
        raise ValueError("log-log fit needs positive values")
    return float(np.polyfit(np.log(pts[:, 0]), np.log(pts[:, 1]), 1)[0])


def _density_grid(energy_fn, box_length, beta, nodes):
    if nodes % 2:
        nodes += 1
    x = np.linspace(0.0, box_length, nodes + 1)
    w = np.exp(-beta * np.array([energy_fn(v) for v in x]))
    return x, w


def gibbs_expectation(g, energy_fn, box_length, beta, nodes=10_000) -> float:
    """``int g exp(-beta U) dq / Z`` on the 1-D torus by composite Simpson's rule."""
    x, w = _density_grid(energy_fn, box_length, beta, nodes)
    z = integrate.simpson(w, x=x)
    return float(integrate.simpson(w * np.vectorize(g)(x), x=x) / z)


def gibbs_bin_probabilities(energy_fn, box_length, beta, n_bins, nodes_per_bin=200):
    """Gibbs probability of each of ``n_bins`` equal bins on ``[0, L)``."""
    edges = np.linspace(0.0, box_length, n_bins + 1)
    out = np.empty(n_bins)
    for k in range(n_bins):
        x = np.linspace(edges[k], edges[k + 1], nodes_per_bin + 1)
        out[k] = integrate.simpson(np.exp(-beta * energy_fn(x)), x=x)
    return out / out.sum()


def momentum_moment(order, mass, beta) -> float:
    """``E[p^k]`` under the Maxwell distribution ``N(0, m / beta)``."""
    if order % 2:
        return 0.0
    var = mass / beta
    return float(var ** (order // 2) * np.prod(np.arange(order - 1, 0, -2), initial=1.0))


class CoupledDifference:
    """Running estimate of ``A^h(tau) - A^2h(tau)`` from synchronously coupled chain pairs.

    Each origin ``x0`` drawn from the equilibrium h-chain starts one h-chain
    and one 2h-chain driven by the same Brownian path; the contribution at lag
    ``tau`` is ``p0 . (P^h(tau) - P^2h(tau))``. Both chains leave the
    equilibrium law invariant, so the mean of these contributions equals the
    difference of the two correlation functions exactly, while the coupling
    removes most of the sampling noise that separate runs would carry.
    """

    def __init__(self, h, taus):
        self.h = float(h)
        self.taus = np.asarray(taus, dtype=float)
        self.sums = np.zeros(len(self.taus))
        self.sumsq = np.zeros(len(self.taus))
        self.count = 0

    def add(self, d):
        d = np.asarray(d, dtype=float)
        if d.shape != self.sums.shape:
            raise ValueError("difference sample does not match the lag grid")
        self.sums += d
        self.sumsq += d * d
        self.count += 1

    def merge(self, other: "CoupledDifference") -> "CoupledDifference":
        if self.h != other.h or not np.array_equal(self.taus, other.taus):
            raise ValueError("differences live on different lag grids")
        out = CoupledDifference(self.h, self.taus)
        out.sums = self.sums + other.sums
        out.sumsq = self.sumsq + other.sumsq
        out.count = self.count + other.count
        return out

    @property
    def values(self):
        if self.count == 0:
            raise ValueError("no samples accumulated")
        return self.sums / self.count

    @property
    def stderr(self):
        if self.count < 2:
            return np.full(len(self.taus), np.inf)
        mean = self.values
        var = (self.sumsq / self.count - mean * mean) * self.count / (self.count - 1)
        return np.sqrt(np.maximum(var, 0.0) / self.count)

    def relative_error(self, a_ref) -> float:
        """``sup |A^h - A^2h| / sup |A_ref|`` with the numerator from the coupled mean."""
        _, vr = _as_curve(a_ref)
        denom = np.max(np.abs(vr))
        if denom == 0:
            raise ValueError("reference estimate is identically zero")
        return float(np.max(np.abs(self.values)) / denom)

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("tau,dA,stderr\n")
            for tau, a, s in zip(self.taus, self.values, self.stderr):
                fh.write(f"{tau:.10g},{a:.12g},{s:.6g}\n")
