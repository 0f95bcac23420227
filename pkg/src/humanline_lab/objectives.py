"""Preference and group losses (DPO, KTO, GRPO) with analytic gradients.

Every loss is written as a function of the per-token policy log-probs.  It
returns the scalar loss and ``dloss / dlogp_t`` for every token; the policy
turns those weights into a logit gradient with
:meth:`Policy.grad_from_token_weights`.  Reference and baseline log-probs
are constants.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence as Seq

import numpy as np
from scipy.special import expit

from .humanline import HumanlineConfig, clip_passthrough, humanline_clip, humanline_sample_mask, token_ratio_bounds
from .policy import GradTape, Policy, Sequence, TokenBatch
from .records import Group, LabeledExample, PreferenceRecord, split_pairs

OBJECTIVES = ("dpo", "kto", "grpo")


@dataclass(frozen=True)
class LossConfig:
    objective: str = "dpo"
    beta: float = 0.1
    desirable_weight: float = 1.0
    undesirable_weight: float = 1.0
    epsilon: float = 0.15
    length_normalized: bool = False
    # "reference" reuses pi_ref as the KL baseline; "initial" pins it to pi_0
    baseline: str = "reference"

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.beta < 0 or (self.objective != "grpo" and self.beta == 0):
            raise ValueError("beta must be > 0 (GRPO allows 0 to drop the KL term)")
        if not (self.desirable_weight > 0 and self.undesirable_weight > 0):
            raise ValueError("KTO weights must be > 0")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if self.baseline not in ("reference", "initial"):
            raise ValueError("baseline must be 'reference' or 'initial'")


@dataclass
class LossResult:
    loss: float
    token_grad: np.ndarray
    batch: TokenBatch
    metrics: dict = field(default_factory=dict)

    def tape(self, policy: Policy) -> GradTape:
        return policy.grad_from_token_weights(self.batch, self.token_grad)


# ----------------------------------------------------------------------
# token treatment


def treat_log_ratios(log_ratio: np.ndarray, humanline: HumanlineConfig | None, mask=None):
    """Apply humanline treatment; return ``(values, d values / d logp)``.

    ``mask`` marks tokens detached by humanline sampling; it is required in
    sampling mode so that the loss stays a pure function of its inputs.
    """
    log_ratio = np.asarray(log_ratio, dtype=float)
    mode = "off" if humanline is None else humanline.mode
    if mode == "clipping":
        vals = humanline_clip(log_ratio, humanline)
        deriv = clip_passthrough(log_ratio, humanline)
    else:
        vals = log_ratio.copy()
        deriv = np.ones_like(log_ratio)
    if mode == "sampling" and mask is None:
        raise ValueError("humanline sampling needs a detach mask")
    if mask is not None:
        deriv = np.where(np.asarray(mask, dtype=bool), 0.0, deriv)
    return vals, deriv


def sampling_mask(policy: Policy, reference: Policy, batch: TokenBatch,
                  humanline: HumanlineConfig | None, rng) -> np.ndarray | None:
    """Draw a humanline-sampling detach mask, or ``None`` in other modes."""
    if humanline is None or humanline.mode != "sampling":
        return None
    lr = policy.token_logps(batch) - reference.token_logps(batch)
    bounds = token_ratio_bounds(policy, reference, batch)
    return humanline_sample_mask(lr, bounds, humanline, rng)


def _sequence_rewards(batch, policy_lp, ref_lp, humanline, length_normalized, mask=None):
    vals, deriv = treat_log_ratios(policy_lp - ref_lp, humanline, mask)
    rewards = batch.seq_sum(vals)
    if length_normalized:
        counts = np.maximum(batch.seq_sum((vals != 0).astype(float)), 1.0)
        rewards = rewards / counts
        deriv = deriv / counts[batch.seq_ids]
    return rewards, deriv


def sequence_reward(policy_logps, reference_logps, humanline: HumanlineConfig | None = None,
                    length_normalized: bool = False, mask=None) -> float:
    """Surprisal ``log pi(y|x) - log pi_ref(y|x)`` with humanline treatment per token."""
    p = np.asarray(policy_logps, dtype=float)
    r = np.asarray(reference_logps, dtype=float)
    if p.shape != r.shape:
        raise ValueError("policy and reference log-probs must be aligned")
    n = len(p)
    batch = TokenBatch(np.zeros(n, dtype=np.int64), np.zeros(n, dtype=np.int64),
                       np.zeros(n, dtype=np.int64), np.array([n]))
    rewards, _ = _sequence_rewards(batch, p, r, humanline, length_normalized, mask)
    return float(rewards[0])


def log_sigmoid(u):
    return -np.logaddexp(0.0, -u)


# ----------------------------------------------------------------------
# DPO


def dpo_batch(records: Seq[PreferenceRecord], policy: Policy, reference: Policy,
              cfg: LossConfig, humanline: HumanlineConfig | None = None,
              mask=None, batch: TokenBatch | None = None) -> LossResult:
    """Mean DPO loss over preference pairs.

    Sequences are laid out chosen/rejected interleaved: ``[w0, l0, w1, l1, ...]``.
    """
    if not records:
        raise ValueError("empty batch")
    if batch is None:
        batch = dpo_layout(records, policy)
    lp = policy.token_logps(batch)
    ref = reference.token_logps(batch)
    rewards, deriv = _sequence_rewards(batch, lp, ref, humanline, cfg.length_normalized, mask)
    r_w, r_l = rewards[0::2], rewards[1::2]
    u = cfg.beta * (r_w - r_l)
    losses = -log_sigmoid(u)
    P = len(records)
    dl_du = -expit(-u) / P
    sign = np.where(batch.seq_ids % 2 == 0, 1.0, -1.0)
    token_grad = dl_du[batch.seq_ids // 2] * cfg.beta * sign * deriv
    return LossResult(
        float(losses.mean()), token_grad, batch,
        {"chosen_rewards": cfg.beta * r_w, "rejected_rewards": cfg.beta * r_l,
         "losses": losses, "accuracy": float(np.mean(u > 0))},
    )


def dpo_layout(records, policy: Policy) -> TokenBatch:
    seqs = []
    for r in records:
        seqs += [r.chosen, r.rejected]
    return policy.encode(seqs)


def dpo_loss(pair: PreferenceRecord, policy: Policy, reference: Policy, cfg: LossConfig,
             humanline: HumanlineConfig | None = None, mask=None):
    """Single-pair DPO: ``(loss, chosen_reward, rejected_reward)``."""
    res = dpo_batch([pair], policy, reference, cfg, humanline, mask)
    return res.loss, float(res.metrics["chosen_rewards"][0]), float(res.metrics["rejected_rewards"][0])


# ----------------------------------------------------------------------
# KTO


def mismatched_pairs(examples: Seq[LabeledExample]) -> list[Sequence]:
    """Pair each prompt with the next example's output (cyclic shift)."""
    n = len(examples)
    if n < 2:
        raise ValueError("KTO needs at least two examples to form mismatched pairs")
    return [Sequence(examples[i].x, examples[(i + 1) % n].y) for i in range(n)]


def kto_z0(kl_batch: TokenBatch, policy: Policy, reference: Policy,
           humanline: HumanlineConfig | None, length_normalized: bool = False) -> float:
    """Shared, detached KL estimate: mean over non-zero mismatched rewards, floored at 0."""
    if kl_batch.n_seqs == 0:
        raise ValueError("empty KL batch")
    lp = policy.token_logps(kl_batch)
    ref = reference.token_logps(kl_batch)
    vals, _ = treat_log_ratios(lp - ref, humanline if humanline and humanline.mode == "clipping" else None)
    rewards = kl_batch.seq_sum(vals)
    if length_normalized:
        rewards = rewards / np.maximum(kl_batch.seq_sum((vals != 0).astype(float)), 1.0)
    nonzero = max(float(np.count_nonzero(rewards)), 1.0)
    return max(float(rewards.sum() / nonzero), 0.0)


def kto_batch(examples: Seq[LabeledExample], policy: Policy, reference: Policy,
              cfg: LossConfig, humanline: HumanlineConfig | None = None,
              kl_seqs: Seq[Sequence] | None = None, mask=None,
              batch: TokenBatch | None = None, z0: float | None = None) -> LossResult:
    """Mean KTO loss; ``z0`` comes from mismatched prompt/output pairs with no gradient.

    Passing ``z0`` skips its estimation (finite-difference checks hold it fixed).
    """
    if not examples:
        raise ValueError("empty batch")
    if kl_seqs is None:
        kl_seqs = mismatched_pairs(examples)
    if len(kl_seqs) == 0:
        raise ValueError("empty KL batch")
    if batch is None:
        batch = policy.encode([e.seq for e in examples])
    if z0 is None:
        z0 = kto_z0(policy.encode(list(kl_seqs)), policy, reference, humanline,
                    cfg.length_normalized)
    lp = policy.token_logps(batch)
    ref = reference.token_logps(batch)
    rewards, deriv = _sequence_rewards(batch, lp, ref, humanline, cfg.length_normalized, mask)
    desirable = np.array([e.desirable for e in examples])
    a = np.where(desirable, cfg.beta * (rewards - z0), cfg.beta * (z0 - rewards))
    lam = np.where(desirable, cfg.desirable_weight, cfg.undesirable_weight)
    s = expit(a)
    losses = lam * (1.0 - s)
    n = len(examples)
    # d/dr of lam * (1 - sigmoid(a)); a moves with +r for desirable and -r otherwise
    dl_dr = -lam * s * (1.0 - s) * cfg.beta * np.where(desirable, 1.0, -1.0) / n
    token_grad = dl_dr[batch.seq_ids] * deriv
    return LossResult(float(losses.mean()), token_grad, batch,
                      {"z0": z0, "losses": losses, "rewards": rewards})


def kto_loss(examples: Seq[LabeledExample], kl_seqs: Seq[Sequence], policy: Policy,
             reference: Policy, cfg: LossConfig, humanline: HumanlineConfig | None = None):
    """Per-example KTO losses and the shared ``z0``."""
    res = kto_batch(examples, policy, reference, cfg, humanline, kl_seqs)
    return res.metrics["losses"], res.metrics["z0"]


# ----------------------------------------------------------------------
# GRPO


def group_advantages(rewards) -> np.ndarray:
    """Standardise rewards within a group (population std, 1e-8 floor)."""
    r = np.asarray(rewards, dtype=float)
    if r.ndim != 1 or len(r) < 2:
        raise ValueError("a group needs at least two rewards")
    if len(r) == 2 and r[0] != r[1]:
        # standardising two distinct values gives exactly +-1; skip the rounding
        return np.sign(r - r[::-1])
    std = r.std()
    if std < 1e-8:
        return np.zeros_like(r)
    return (r - r.mean()) / std


def with_advantages(group: Group) -> Group:
    return Group(group.x, group.outputs, group.rewards, group_advantages(group.rewards))


def grpo_batch(groups: Seq[Group], policy: Policy, reference: Policy, baseline: Policy,
               cfg: LossConfig, humanline: HumanlineConfig | None = None,
               mask=None, batch: TokenBatch | None = None) -> LossResult:
    """Clipped surrogate plus ``exp(d) - d - 1`` KL, averaged over all batch tokens."""
    if not groups:
        raise ValueError("empty batch")
    for g in groups:
        if g.advantages is None:
            raise ValueError("group advantages must be computed before the loss")
    seqs = [s for g in groups for s in g.sequences]
    adv_seq = np.concatenate([np.asarray(g.advantages, dtype=float) for g in groups])
    if batch is None:
        batch = policy.encode(seqs)
    lp = policy.token_logps(batch)
    ref = reference.token_logps(batch)
    base = baseline.token_logps(batch)
    A = adv_seq[batch.seq_ids]

    vals, deriv = treat_log_ratios(lp - ref, humanline, mask)
    ratio = np.exp(vals)
    lo, hi = 1.0 - cfg.epsilon, 1.0 + cfg.epsilon
    clipped = np.clip(ratio, lo, hi)
    unclipped_term = ratio * A
    clipped_term = clipped * A
    surrogate = -np.minimum(unclipped_term, clipped_term)
    inside = (ratio >= lo) & (ratio <= hi)
    flows = inside | (unclipped_term < clipped_term)
    d_surrogate = np.where(flows, -A * ratio * deriv, 0.0)

    delta = base - lp
    kl = np.expm1(delta) - delta
    d_kl = 1.0 - np.exp(delta)

    T = batch.n_tokens
    per_token = surrogate + cfg.beta * kl
    token_grad = (d_surrogate + cfg.beta * d_kl) / T
    return LossResult(
        float(per_token.sum() / T), token_grad, batch,
        {"kl": float(kl.mean()), "clip_fraction": float(np.mean(~inside)),
         "weighted_adv": float(np.mean(np.abs(unclipped_term))),
         "mean_abs_adv": float(np.mean(np.abs(adv_seq)))},
    )


def grpo_loss(group: Group, policy: Policy, reference: Policy, baseline: Policy,
              cfg: LossConfig, humanline: HumanlineConfig | None = None, mask=None):
    """Single-group GRPO: ``(loss, mean KL, diagnostics)``."""
    res = grpo_batch([group], policy, reference, baseline, cfg, humanline, mask)
    return res.loss, res.metrics["kl"], res.metrics


# ----------------------------------------------------------------------
# dispatch used by the trainer


def records_to_groups(records: Seq[PreferenceRecord]) -> list[Group]:
    out = []
    for r in records:
        if r.r_w is not None and r.r_l is not None:
            rewards = (r.r_w, r.r_l)
        else:
            rewards = (1.0, 0.0)
        out.append(with_advantages(Group(r.x, [r.y_w, r.y_l], rewards)))
    return out


def compute_loss(items, policy: Policy, reference: Policy, baseline: Policy,
                 cfg: LossConfig, humanline: HumanlineConfig | None = None,
                 rng: np.random.Generator | None = None) -> LossResult:
    """Evaluate the configured objective on a batch.

    ``items`` are preference records (all objectives) or groups (GRPO).  KTO
    splits pairs into unpaired examples; GRPO treats a pair as a group of two.
    """
    obj = cfg.objective
    if obj == "dpo":
        batch = dpo_layout(items, policy)
        mask = sampling_mask(policy, reference, batch, humanline, rng)
        return dpo_batch(items, policy, reference, cfg, humanline, mask, batch)
    if obj == "kto":
        examples = items if items and isinstance(items[0], LabeledExample) else split_pairs(items)
        batch = policy.encode([e.seq for e in examples])
        mask = sampling_mask(policy, reference, batch, humanline, rng)
        return kto_batch(examples, policy, reference, cfg, humanline, None, mask, batch)
    groups = [g if isinstance(g, Group) else None for g in items]
    if any(g is None for g in groups):
        groups = records_to_groups(items)
    groups = [g if g.advantages is not None else with_advantages(g) for g in groups]
    batch = policy.encode([s for g in groups for s in g.sequences])
    mask = sampling_mask(policy, reference, batch, humanline, rng)
    return grpo_batch(groups, policy, reference, baseline, cfg, humanline, mask, batch)
