"""Humanline token treatment (clipping or sampling) and the reference syncing schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from .policy import Policy, TokenBatch

MODES = ("clipping", "sampling", "off")
BOUND_SLACK = 1e-6


@dataclass(frozen=True)
class HumanlineConfig:
    """Token treatment (``mode``) plus reference syncing period ``k``.

    ``k=None`` never syncs.  Log-space clip bounds are in nats.  The Beta
    parameters only matter in sampling mode; ``beta_* == 1`` uses the exact
    inverse-CDF draw ``U ** (1 / gamma)``.
    """

    mode: str = "clipping"
    log_eps_P: float = -1.5
    log_eps_R: float = 1.5
    k: int | None = 1
    gamma_P: float = 0.6
    beta_P: float = 1.0
    gamma_R: float = 0.6
    beta_R: float = 1.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"humanline mode must be one of {MODES}, got {self.mode!r}")
        if not self.log_eps_P < self.log_eps_R:
            raise ValueError("log_eps_P must be below log_eps_R")
        if self.k is not None:
            if isinstance(self.k, float) and math.isinf(self.k):
                object.__setattr__(self, "k", None)
            elif int(self.k) < 1:
                raise ValueError("sync period k must be >= 1")
            else:
                object.__setattr__(self, "k", int(self.k))
        for name in ("gamma_P", "beta_P", "gamma_R", "beta_R"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")

    @classmethod
    def disabled(cls) -> "HumanlineConfig":
        return cls(mode="off", k=None)

    @property
    def active(self) -> bool:
        return self.mode != "off" or self.k is not None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class RatioBounds:
    """Upper bounds on pi/pi_ref (``M_P``) and pi_ref/pi (``M_R``)."""

    M_P: np.ndarray | float
    M_R: np.ndarray | float


def bounds_from_log_tables(
    policy_lp: np.ndarray, ref_lp: np.ndarray, slack: float = BOUND_SLACK
) -> RatioBounds:
    """Per-row bounds from log-probability tables of shape ``(..., V)``."""
    diff = policy_lp - ref_lp
    M_P = np.exp(diff.max(axis=-1)) * (1.0 + slack)
    M_R = np.exp((-diff).max(axis=-1)) * (1.0 + slack)
    return RatioBounds(M_P, M_R)


def compute_ratio_bounds(policy: Policy, reference: Policy, context_state: int) -> RatioBounds:
    """Exact bounds at one context state by enumerating the vocabulary."""
    lp = policy.log_probs_table()[context_state]
    lr = reference.log_probs_table()[context_state]
    b = bounds_from_log_tables(lp, lr)
    return RatioBounds(float(b.M_P), float(b.M_R))


def token_ratio_bounds(policy: Policy, reference: Policy, batch: TokenBatch) -> RatioBounds:
    b = bounds_from_log_tables(policy.log_probs_table(), reference.log_probs_table())
    return RatioBounds(b.M_P[batch.states], b.M_R[batch.states])


def humanline_clip(log_ratios, config: HumanlineConfig) -> np.ndarray:
    """Clamp token log-ratios to ``[log_eps_P, log_eps_R]``."""
    return np.clip(np.asarray(log_ratios, dtype=float), config.log_eps_P, config.log_eps_R)


def clip_passthrough(log_ratios, config: HumanlineConfig) -> np.ndarray:
    """Derivative of :func:`humanline_clip`: 1 inside the (closed) range, else 0."""
    lr = np.asarray(log_ratios, dtype=float)
    return ((lr >= config.log_eps_P) & (lr <= config.log_eps_R)).astype(float)


def draw_beta(rng: np.random.Generator, a, b, size) -> np.ndarray:
    a = np.broadcast_to(np.asarray(a, dtype=float), size)
    b = np.broadcast_to(np.asarray(b, dtype=float), size)
    if np.all(b == 1.0):
        return rng.random(size) ** (1.0 / a)
    return rng.beta(a, b, size=size)


def humanline_sample_mask(
    log_ratios,
    bounds: RatioBounds,
    config: HumanlineConfig,
    rng: np.random.Generator,
) -> np.ndarray:
    """Boolean mask of rejected (detached) tokens.

    Token ``t`` is rejected iff ``rho < M_P * B_P`` or ``1/rho < M_R * B_R``
    with fresh independent Beta draws per token.  Comparisons run in log
    space.
    """
    lr = np.asarray(log_ratios, dtype=float)
    size = lr.shape
    b_p = draw_beta(rng, config.gamma_P, config.beta_P, size)
    b_r = draw_beta(rng, config.gamma_R, config.beta_R, size)
    with np.errstate(divide="ignore"):
        rej_p = lr < np.log(bounds.M_P) + np.log(b_p)
        rej_r = -lr < np.log(bounds.M_R) + np.log(b_r)
    return rej_p | rej_r


def single_sided_accept(
    log_ratios, log_bound, gamma: float, rng: np.random.Generator, beta: float = 1.0
) -> np.ndarray:
    """Accept iff ``rho >= M' * B`` with ``B ~ Beta(gamma, beta)``."""
    lr = np.asarray(log_ratios, dtype=float)
    b = draw_beta(rng, gamma, beta, lr.shape)
    with np.errstate(divide="ignore"):
        return ~(lr < np.asarray(log_bound) + np.log(b))


@dataclass(frozen=True)
class BetaParams:
    gamma_P: np.ndarray | float
    beta_P: np.ndarray | float
    gamma_R: np.ndarray | float
    beta_R: np.ndarray | float

    def mean_P(self):
        return self.gamma_P / (self.gamma_P + self.beta_P)

    def var_P(self):
        s = self.gamma_P + self.beta_P
        return self.gamma_P * self.beta_P / (s * s * (s + 1))

    def mean_R(self):
        return self.gamma_R / (self.gamma_R + self.beta_R)


def concentrated_beta_params(k: float, eps_P: float, eps_R: float, bounds: RatioBounds) -> BetaParams:
    """Beta parameters whose draws concentrate on ``eps_P/M_P`` and ``1/(eps_R M_R)``.

    As ``k`` grows, humanline sampling with these parameters detaches exactly
    the tokens whose ratio leaves ``[eps_P, eps_R]``.
    """
    M_P = np.asarray(bounds.M_P, dtype=float)
    M_R = np.asarray(bounds.M_R, dtype=float)
    if k <= 0:
        raise ValueError("k must be positive")
    if np.any(eps_P >= M_P):
        raise ValueError("need eps_P < M_P")
    if np.any(eps_R * M_R <= 1.0):
        raise ValueError("need eps_R > 1 / M_R")
    mp = eps_P / M_P
    mr = 1.0 / (eps_R * M_R)
    out = BetaParams(k * mp, k * (1.0 - mp), k * mr, k * (1.0 - mr))
    if M_P.ndim == 0:
        out = BetaParams(*(float(v) for v in (out.gamma_P, out.beta_P, out.gamma_R, out.beta_R)))
    return out


def sample_mask_with_params(log_ratios, bounds: RatioBounds, params: BetaParams, rng) -> np.ndarray:
    """Rejection mask with (possibly per-token) Beta parameters."""
    lr = np.asarray(log_ratios, dtype=float)
    b_p = rng.beta(np.broadcast_to(params.gamma_P, lr.shape), np.broadcast_to(params.beta_P, lr.shape))
    b_r = rng.beta(np.broadcast_to(params.gamma_R, lr.shape), np.broadcast_to(params.beta_R, lr.shape))
    with np.errstate(divide="ignore"):
        rej_p = lr < np.log(bounds.M_P) + np.log(b_p)
        rej_r = -lr < np.log(bounds.M_R) + np.log(b_r)
    return rej_p | rej_r


def sync_schedule(step: int, k: int | float | None) -> bool:
    """True on steps that are multiples of ``k``; ``None``/inf never fires."""
    if step < 1:
        raise ValueError("steps are counted from 1")
    if k is None or (isinstance(k, float) and math.isinf(k)):
        return False
    return step % int(k) == 0


def perceived_token_distribution(p_theta: np.ndarray, p_ref: np.ndarray, gamma: float) -> np.ndarray:
    """Normalised ``p_ref * (p_theta / p_ref) ** gamma`` over a vocabulary."""
    w = p_ref * (p_theta / p_ref) ** gamma
    return w / w.sum()


def simulate_token_rejection(
    p_theta: np.ndarray, p_ref: np.ndarray, gamma: float, n: int, rng: np.random.Generator
) -> np.ndarray:
    """Propose ``n`` tokens from ``p_ref``; return counts of the accepted ones."""
    V = len(p_ref)
    proposals = rng.choice(V, size=n, p=p_ref)
    log_ratio = np.log(p_theta) - np.log(p_ref)
    log_M = np.log(np.exp(log_ratio.max()) * (1.0 + BOUND_SLACK))
    accepted = single_sided_accept(log_ratio[proposals], log_M, gamma, rng)
    return np.bincount(proposals[accepted], minlength=V)
