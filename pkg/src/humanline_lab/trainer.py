"""Training loop for offline and online variants, with or without humanline."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence as Seq

import numpy as np

from .data import RewardSource, RoundStats, online_groups, online_round
from .humanline import HumanlineConfig, sync_schedule
from .objectives import LossConfig, compute_loss
from .policy import Policy, load_params
from .records import Group, PreferenceRecord
from .rng import Streams

log = logging.getLogger(__name__)


class NumericalAbort(RuntimeError):
    """Non-finite loss or gradient."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class CollapseAbort(RuntimeError):
    """Evaluation reward stayed below the initial policy's for too long."""


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2
    warmup_frac: float = 0.1
    max_grad_norm: float = 1.0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if not self.max_grad_norm > 0:
            raise ValueError("max_grad_norm must be > 0")
        if not 0 <= self.warmup_frac < 1:
            raise ValueError("warmup_frac must be in [0, 1)")


class AdamW:
    """Decoupled-weight-decay Adam with linear warmup to a constant rate."""

    def __init__(self, cfg: OptimizerConfig, shape, total_steps: int | None = None):
        self.cfg = cfg
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0
        self.warmup_steps = 0 if not total_steps else int(math.ceil(cfg.warmup_frac * total_steps))

    def lr_at(self, t: int) -> float:
        if self.warmup_steps and t <= self.warmup_steps:
            return self.cfg.lr * t / self.warmup_steps
        return self.cfg.lr

    def step(self, params: np.ndarray, grad: np.ndarray) -> None:
        c = self.cfg
        self.t += 1
        lr = self.lr_at(self.t)
        params *= 1.0 - lr * c.weight_decay
        self.m = c.beta1 * self.m + (1.0 - c.beta1) * grad
        self.v = c.beta2 * self.v + (1.0 - c.beta2) * grad * grad
        m_hat = self.m / (1.0 - c.beta1**self.t)
        v_hat = self.v / (1.0 - c.beta2**self.t)
        params -= lr * m_hat / (np.sqrt(v_hat) + c.eps)


def clip_grad_norm(grad: np.ndarray, max_norm: float) -> tuple[np.ndarray, float]:
    """Scale ``grad`` so its L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = float(np.sqrt(np.sum(grad * grad)))
    if norm > max_norm:
        grad = grad * (max_norm / norm)
    return grad, norm


@dataclass
class TrainState:
    policy: Policy
    reference: Policy
    initial: Policy
    optimizer: AdamW
    streams: Streams
    step: int = 0
    round: int = 0
    examples_seen: int = 0
    variant: str = ""
    config: dict = field(default_factory=dict)

    @classmethod
    def create(cls, policy: Policy, opt_cfg: OptimizerConfig, seed: int,
               total_steps: int | None = None, variant: str = "", config: dict | None = None):
        return cls(policy=policy, reference=policy.clone(), initial=policy.clone(),
                   optimizer=AdamW(opt_cfg, policy.logits.shape, total_steps),
                   streams=Streams(seed), variant=variant, config=dict(config or {}))


def _count_sequences(items) -> int:
    n = 0
    for it in items:
        n += it.size if isinstance(it, Group) else 2
    return n


def _batch_reward(items) -> float:
    vals = []
    for it in items:
        if isinstance(it, Group):
            vals.extend(it.rewards.tolist())
        elif isinstance(it, PreferenceRecord) and it.r_w is not None:
            vals.extend([it.r_w, it.r_l])
    return float(np.mean(vals)) if vals else float("nan")


def trust_region_sync(state: TrainState, period: int | None) -> bool:
    """Copy the post-update policy into the reference every ``period`` steps."""
    if period is None or state.step % int(period) != 0:
        return False
    load_params(state.reference, state.policy)
    return True


def train_step(
    state: TrainState,
    batch,
    loss_cfg: LossConfig,
    humanline_cfg: HumanlineConfig | None = None,
    trust_region_period: int | None = None,
) -> dict:
    """loss -> gradient -> norm clip -> (humanline sync) -> optimizer step."""
    if not batch:
        raise ValueError("empty batch")
    baseline = state.initial if loss_cfg.baseline == "initial" else state.reference
    res = compute_loss(batch, state.policy, state.reference, baseline, loss_cfg,
                       humanline_cfg, rng=state.streams["beta"])
    tape = res.tape(state.policy)
    grad = tape.grad
    if not (math.isfinite(res.loss) and np.all(np.isfinite(grad))):
        raise NumericalAbort(
            f"non-finite loss/gradient at step {state.step + 1}",
            {"loss": res.loss, "nonfinite_grad": int(np.sum(~np.isfinite(grad)))},
        )
    grad, norm = clip_grad_norm(grad, state.optimizer.cfg.max_grad_norm)
    state.step += 1
    synced = False
    if humanline_cfg is not None and sync_schedule(state.step, humanline_cfg.k):
        # the reference takes the pre-update weights
        load_params(state.reference, state.policy)
        synced = True
    state.optimizer.step(state.policy.logits, grad)
    if trust_region_sync(state, trust_region_period):
        synced = True
    state.examples_seen += _count_sequences(batch)
    kl = res.metrics.get("kl")
    if kl is None:
        kl = float(res.metrics.get("z0", 0.0))
    return {
        "step": state.step,
        "loss": res.loss,
        "mean_reward": _batch_reward(batch),
        "grad_norm": norm,
        "kl": kl,
        "synced": synced,
        "variant": state.variant,
        "examples_seen": state.examples_seen,
    }


def skip_step(state: TrainState) -> dict:
    """Advance the step counter without an update (nothing left to train on)."""
    state.step += 1
    return {"step": state.step, "loss": None, "mean_reward": None, "grad_norm": 0.0,
            "kl": None, "synced": False, "variant": state.variant,
            "examples_seen": state.examples_seen, "skipped": True}


EvalFn = Callable[[Policy], float]


class _CollapseWatch:
    def __init__(self, initial: float | None, patience: int | None):
        self.initial = initial
        self.patience = patience
        self.below = 0

    def update(self, value: float, steps: int) -> None:
        if self.patience is None or self.initial is None:
            return
        self.below = self.below + steps if value < self.initial else 0
        if self.below >= self.patience:
            raise CollapseAbort(
                f"reward {value:.4f} below initial {self.initial:.4f} for {self.below} steps")


def _maybe_eval(state, history_row, eval_fn, eval_every, watch):
    if eval_fn is None or not eval_every or state.step % eval_every:
        return
    value = float(eval_fn(state.policy))
    history_row["eval_reward"] = value
    watch.update(value, eval_every)


def run_offline(
    state: TrainState,
    dataset: Seq,
    steps: int,
    batch_size: int,
    loss_cfg: LossConfig,
    humanline_cfg: HumanlineConfig | None = None,
    trust_region_period: int | None = None,
    eval_fn: EvalFn | None = None,
    eval_every: int = 0,
    collapse_patience: int | None = None,
    on_step: Callable[[dict], None] | None = None,
) -> list[dict]:
    """Iterate shuffled minibatches from a fixed dataset; wraps epochs with a reshuffle."""
    if not dataset:
        raise ValueError("empty dataset")
    rng = state.streams["shuffle"]
    order = rng.permutation(len(dataset))
    pos = 0
    history = []
    watch = _CollapseWatch(eval_fn(state.policy) if (eval_fn and collapse_patience) else None,
                           collapse_patience)
    for _ in range(steps):
        idx = []
        while len(idx) < min(batch_size, len(dataset)):
            if pos == len(order):
                order = rng.permutation(len(dataset))
                pos = 0
            idx.append(order[pos])
            pos += 1
        row = train_step(state, [dataset[i] for i in idx], loss_cfg, humanline_cfg,
                         trust_region_period)
        _maybe_eval(state, row, eval_fn, eval_every, watch)
        history.append(row)
        if on_step:
            on_step(row)
    return history


def draw_buffer(state, reward, contexts, n_items, G, tau, group_mode,
                temperature, top_p, oversample=1.0, max_attempts=8):
    """Sample up to ``n_items`` training items from the current policy.

    Filtered-out rounds are refilled with fresh prompts; a policy whose groups
    are all identical can leave the buffer short after ``max_attempts``.
    """
    rng = state.streams.sub("sampling", state.round)
    ctx_rng = state.streams.sub("contexts", state.round)
    items: list = []
    stats = RoundStats()
    attempts = 0
    while len(items) < n_items:
        if attempts == max_attempts:
            log.warning("round %d: buffer short (%d/%d items) after %d refills",
                        state.round, len(items), n_items, attempts)
            break
        if attempts:
            log.info("round %d: refilling buffer with fresh contexts (%d/%d items)",
                     state.round, len(items), n_items)
        need = n_items - len(items)
        n_ctx = int(math.ceil(need * oversample))
        chosen = [contexts[i] for i in ctx_rng.integers(len(contexts), size=n_ctx)]
        if group_mode == "full":
            items += online_groups(state.policy, reward, chosen, G, rng, temperature, top_p)
        else:
            items += online_round(state.policy, reward, chosen, G, tau, rng,
                                  temperature, top_p, stats)
        attempts += 1
    return items[:n_items], stats


def run_online(
    state: TrainState,
    reward: RewardSource,
    contexts: Seq[Seq[int]],
    steps: int,
    batch_size: int,
    sample_period: int,
    loss_cfg: LossConfig,
    humanline_cfg: HumanlineConfig | None = None,
    G: int = 8,
    tau: float = 0.01,
    group_mode: str = "pairs",
    temperature: float = 0.7,
    top_p: float = 0.95,
    oversample: float = 1.0,
    trust_region_period: int | None = None,
    eval_fn: EvalFn | None = None,
    eval_every: int = 0,
    collapse_patience: int | None = None,
    on_step: Callable[[dict], None] | None = None,
) -> list[dict]:
    """Every ``sample_period`` steps draw ``sample_period * batch_size`` fresh items.

    At each round boundary the reference is reset to the current policy.
    """
    if sample_period < 1:
        raise ValueError("sample_period must be >= 1")
    history = []
    watch = _CollapseWatch(eval_fn(state.policy) if (eval_fn and collapse_patience) else None,
                           collapse_patience)
    buffer: list = []
    for i in range(steps):
        if i % sample_period == 0:
            state.round += 1
            load_params(state.reference, state.policy)
            buffer, stats = draw_buffer(state, reward, contexts, sample_period * batch_size, G,
                                        tau, group_mode, temperature, top_p, oversample)
            if stats.contexts:
                log.debug("round %d filtered %.1f%%", state.round, 100 * stats.filtered_fraction)
            perm = state.streams.sub("shuffle", state.round).permutation(len(buffer))
            buffer = [buffer[j] for j in perm]
        j = (i % sample_period) * batch_size
        chunk = buffer[j:j + batch_size]
        if not chunk:
            history.append(skip_step(state))
            continue
        row = train_step(state, chunk, loss_cfg, humanline_cfg, trust_region_period)
        _maybe_eval(state, row, eval_fn, eval_every, watch)
        history.append(row)
        if on_step:
            on_step(row)
    return history
