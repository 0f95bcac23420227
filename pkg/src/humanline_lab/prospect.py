"""Prospect-theoretic value and probability-weighting functions."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


@dataclass(frozen=True)
class ProspectParams:
    """Value-function shape and capacity constants.

    ``alpha`` is the curvature exponent, ``lam`` the loss-aversion
    coefficient and ``z0`` the reference point.  ``gamma`` / ``gamma_minus``
    are the gain-side and loss-side capacity constants.
    """

    alpha: float = 1.0
    lam: float = 1.0
    z0: float = 0.0
    gamma: float = 0.6
    gamma_minus: float = 0.6
    human_range: bool = False

    def __post_init__(self):
        for name in ("alpha", "lam", "gamma", "gamma_minus"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")
        if self.human_range and not (self.gamma <= 1 and self.gamma_minus <= 1):
            raise ValueError("capacity constants must lie in (0, 1] in human_range mode")


@dataclass(frozen=True)
class OutcomeDistribution:
    """Finite outcomes sorted from least to most positive."""

    outcomes: tuple[float, ...]
    probs: tuple[float, ...]

    def __post_init__(self):
        z = np.asarray(self.outcomes, dtype=float)
        p = np.asarray(self.probs, dtype=float)
        if z.shape != p.shape or z.ndim != 1 or len(z) == 0:
            raise ValueError("outcomes and probs must be equal-length non-empty vectors")
        if np.any(p < 0):
            raise ValueError("probabilities must be non-negative")
        if abs(p.sum() - 1.0) > 1e-12:
            raise ValueError(f"probabilities sum to {p.sum()!r}, not 1")
        if np.any(np.diff(z) < 0):
            raise ValueError("outcomes must be sorted from least to most positive")
        object.__setattr__(self, "outcomes", tuple(float(v) for v in z))
        object.__setattr__(self, "probs", tuple(float(v) for v in p))

    @classmethod
    def from_unsorted(cls, outcomes, probs) -> "OutcomeDistribution":
        z = np.asarray(outcomes, dtype=float)
        order = np.argsort(z, kind="stable")
        return cls(tuple(z[order]), tuple(np.asarray(probs, dtype=float)[order]))

    def merged(self) -> "OutcomeDistribution":
        """Collapse equal outcomes by summing their probabilities."""
        z = np.asarray(self.outcomes)
        uniq, inv = np.unique(z, return_inverse=True)
        if len(uniq) == len(z):
            return self
        p = np.bincount(inv, weights=np.asarray(self.probs))
        return OutcomeDistribution(tuple(uniq), tuple(p))


def value(z, params: ProspectParams):
    """Subjective value of outcome(s) ``z`` relative to ``params.z0``."""
    z = np.asarray(z, dtype=float)
    d = z - params.z0
    gain = np.abs(d) ** params.alpha
    out = np.where(d >= 0, gain, -params.lam * gain)
    return out if out.ndim else float(out)


def capacity(a, gamma: float):
    """Map cumulative probabilities to perceived cumulative probabilities."""
    a = np.asarray(a, dtype=float)
    if np.any((a < 0) | (a > 1)) or np.any(np.isnan(a)):
        raise ValueError("cumulative probability must lie in [0, 1]")
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    num = a**gamma
    den = (num + (1.0 - a) ** gamma) ** (1.0 / gamma)
    out = num / den
    return out if out.ndim else float(out)


CapacityFn = Callable[[float], float]


def weights(
    dist: OutcomeDistribution,
    params: ProspectParams,
    gain_capacity: CapacityFn | None = None,
    loss_capacity: CapacityFn | None = None,
) -> np.ndarray:
    """Per-outcome decision weights.

    A gain is weighted by the capacity of outcomes at least as good as it
    minus the capacity of strictly better ones; a loss symmetrically, using
    outcomes at least as bad.  Custom capacity callables can be injected to
    reproduce hand-worked examples.
    """
    dist = dist.merged()
    cg = gain_capacity or (lambda a: capacity(a, params.gamma))
    cl = loss_capacity or (lambda a: capacity(a, params.gamma_minus))
    z = np.asarray(dist.outcomes)
    p = np.asarray(dist.probs)
    w = np.zeros_like(p)
    gains = np.nonzero(z >= params.z0)[0]
    losses = np.nonzero(z < params.z0)[0]
    if len(gains):
        pg = p[gains]
        at_least = np.cumsum(pg[::-1])[::-1]
        strictly_better = at_least - pg
        for k, i in enumerate(gains):
            if k == len(gains) - 1:
                w[i] = cg(pg[k])
            else:
                w[i] = cg(min(at_least[k], 1.0)) - cg(min(strictly_better[k], 1.0))
    if len(losses):
        pl = p[losses]
        at_most = np.cumsum(pl)
        strictly_worse = at_most - pl
        for k, i in enumerate(losses):
            if k == 0:
                w[i] = cl(pl[0])
            else:
                w[i] = cl(min(at_most[k], 1.0)) - cl(min(strictly_worse[k], 1.0))
    return w


def utility(dist: OutcomeDistribution, params: ProspectParams, **capacities) -> float:
    """Expected subjective utility: decision weights dotted with values."""
    merged = dist.merged()
    w = weights(merged, params, **capacities)
    v = value(np.asarray(merged.outcomes), params)
    # exact summation keeps hand-worked examples exact (np.dot may fuse multiply-adds)
    return math.fsum(np.asarray(w * v, dtype=float).tolist())


def kl_divergence(p, q) -> float:
    """KL(p || q) in nats over a shared finite support."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if np.any((p > 0) & (q <= 0)):
        raise ValueError("KL undefined: p puts mass where q has none")
    nz = p > 0
    return float(np.sum(p[nz] * (np.log(p[nz]) - np.log(q[nz]))))


@dataclass(frozen=True)
class UtilityGap:
    lhs: float
    rhs: float
    holds: bool


def utility_gap_bound(
    dist_omega: OutcomeDistribution,
    dist_q: OutcomeDistribution,
    params: ProspectParams,
) -> UtilityGap:
    """Compare ``|u(omega) - u(Q)|`` with ``sqrt(2 KL(omega||Q)) * max|v|``.

    Both arguments list the same outcomes; their probabilities act directly
    as the weights in the utility sum.
    """
    if dist_omega.outcomes != dist_q.outcomes:
        raise ValueError("both distributions must list the same outcomes")
    v = np.asarray(value(np.asarray(dist_omega.outcomes), params), dtype=float)
    w = np.asarray(dist_omega.probs)
    q = np.asarray(dist_q.probs)
    kl = kl_divergence(w, q)
    lhs = abs(float(np.dot(w - q, v)))
    rhs = math.sqrt(2.0 * max(kl, 0.0)) * float(np.max(np.abs(v)))
    # the two sides can tie exactly (e.g. identical distributions)
    return UtilityGap(lhs, rhs, lhs <= rhs + 1e-12 * max(1.0, rhs))


def capacity_crossing(gamma: float, tol: float = 1e-12) -> float:
    """Interior fixed point ``a*`` where ``capacity(a*) == a*`` (gamma < 1)."""
    from scipy.optimize import brentq

    return brentq(lambda a: capacity(a, gamma) - a, 1e-9, 1 - 1e-9, xtol=tol)


def expected_value(dist: OutcomeDistribution) -> float:
    return float(np.dot(dist.outcomes, dist.probs))


def random_distribution(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.dirichlet(np.ones(n))


def sweep_utility_gap(
    n_trials: int = 1000,
    seed: int = 0,
    n_outcomes: Sequence[int] = (2, 3, 5, 8),
) -> list[UtilityGap]:
    """Random (omega, Q, value-function) triples for the Pinsker-style bound."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_trials):
        n = int(rng.choice(n_outcomes))
        z = np.sort(rng.normal(0.0, 3.0, size=n))
        z = np.unique(z)
        n = len(z)
        params = ProspectParams(
            alpha=float(rng.uniform(0.3, 1.0)),
            lam=float(rng.uniform(1.0, 3.0)),
            z0=float(rng.normal(0, 1)),
        )
        w = random_distribution(rng, n)
        q = random_distribution(rng, n)
        w = w / w.sum()
        q = q / q.sum()
        out.append(utility_gap_bound(OutcomeDistribution(tuple(z), tuple(w)),
                                     OutcomeDistribution(tuple(z), tuple(q)), params))
    return out
