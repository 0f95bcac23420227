"""Experiment orchestration: samplers, corpora, variant runs and evaluation."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence as Seq

import numpy as np
from scipy import stats

from .config import RunConfig
from .data import (DatasetManifest, RewardSource, make_offline_corpus, read_corpus)
from .humanline import HumanlineConfig
from .objectives import LossConfig
from .policy import Policy, random_policy, sample_batch
from .rng import stream
from .trainer import OptimizerConfig, TrainState, run_offline, run_online

log = logging.getLogger(__name__)


def reward_source(cfg: RunConfig) -> RewardSource:
    return RewardSource(cfg.reward, cfg.task)


def base_policy(cfg: RunConfig, seed: int) -> Policy:
    return random_policy(cfg.task.vocab, cfg.task.contexts(), cfg.policy.n,
                         cfg.policy.init_scale, stream(seed, "init"), cfg.policy.max_len)


def worse_sampler(base: Policy, noise: float, seed: int) -> Policy:
    """Base policy with Gaussian noise added to every logit."""
    p = base.clone()
    p.logits += noise * stream(seed, "init", 1).standard_normal(p.logits.shape)
    return p


def better_sampler(base: Policy, cfg: RunConfig, seed: int) -> Policy:
    """Base policy pre-optimised on the true reward with online GRPO."""
    state = TrainState.create(base.clone(), OptimizerConfig(lr=0.1, weight_decay=0.0),
                              seed + 7919, cfg.data.better_steps, "better-sampler")
    run_online(state, reward_source(cfg), cfg.task.contexts(), cfg.data.better_steps,
               batch_size=16, sample_period=1,
               loss_cfg=LossConfig("grpo", beta=0.01, epsilon=0.2),
               humanline_cfg=None, G=4, group_mode="full", temperature=1.0, top_p=1.0)
    return state.policy


def make_sampler(cfg: RunConfig, base: Policy, seed: int) -> Policy:
    kind = cfg.data.sampler
    if kind == "base":
        return base.clone()
    if kind == "worse":
        return worse_sampler(base, cfg.data.sampler_noise, seed)
    return better_sampler(base, cfg, seed)


def corpus_size(cfg: RunConfig) -> int:
    """Records consumed by one run: matches the online budget exactly."""
    return cfg.data.corpus_size or cfg.train.steps * cfg.train.batch_size


def build_corpus(cfg: RunConfig, seed: int, base: Policy | None = None):
    base = base_policy(cfg, seed) if base is None else base
    sampler = make_sampler(cfg, base, seed)
    contexts = cfg.task.contexts()
    need = corpus_size(cfg)
    rng = stream(seed, "contexts", 10**6)
    records, manifest = [], None
    chunk = 0
    while len(records) < need:
        chosen = [contexts[i] for i in rng.integers(len(contexts), size=need - len(records))]
        recs, manifest = make_offline_corpus(sampler, reward_source(cfg), chosen, cfg.train.G,
                                             cfg.train.tau, seed * 1000 + chunk, cfg.data.sampler,
                                             cfg.train.temperature, cfg.train.top_p)
        records += recs
        chunk += 1
        if chunk > 50:
            raise RuntimeError("sampler produced too few usable preference pairs")
    records = records[:need]
    scores = [v for r in records for v in (r.r_w, r.r_l)]
    manifest = replace(manifest, seed=int(seed), n_contexts=need, record_count=len(records),
                       mean_reward=float(np.mean(scores)),
                       extra={"chunks": chunk, "sampler_noise": cfg.data.sampler_noise})
    return records, manifest


def expected_reward(policy: Policy, reward: RewardSource, contexts, n: int, seed: int,
                    temperature: float = 1.0, top_p: float = 1.0) -> float:
    """Monte-Carlo mean true reward over ``n`` prompts (common random numbers via ``seed``)."""
    rng = stream(seed, "eval")
    chosen = [contexts[i] for i in rng.integers(len(contexts), size=n)]
    seqs = sample_batch(policy, chosen, rng, temperature, top_p)
    return float(reward.score_many(seqs).mean())


def pass_rate(policy: Policy, reward: RewardSource, contexts, n: int, seed: int,
              temperature: float = 1.0, top_p: float = 1.0) -> float:
    rng = stream(seed, "eval")
    chosen = [contexts[i] for i in rng.integers(len(contexts), size=n)]
    seqs = sample_batch(policy, chosen, rng, temperature, top_p)
    return float(np.mean([reward.passed(s.x, s.y) for s in seqs]))


def winrate(policy: Policy, baseline: Policy, reward: RewardSource, contexts, n: int,
            seed: int, temperature: float = 1.0, top_p: float = 1.0) -> float:
    """Share of prompts where the policy's sample outscores the baseline's (ties count 1/2)."""
    rng = stream(seed, "eval")
    idx = rng.integers(len(contexts), size=n)
    chosen = [contexts[i] for i in idx]
    a = reward.score_many(sample_batch(policy, chosen, stream(seed, "eval", 1), temperature, top_p))
    b = reward.score_many(sample_batch(baseline, chosen, stream(seed, "eval", 2), temperature, top_p))
    return float(np.mean(np.where(a > b, 1.0, np.where(a == b, 0.5, 0.0))))


@dataclass
class EvalReport:
    metric: str
    per_seed: list[float]
    n_samples: int

    @property
    def mean(self) -> float:
        return float(np.mean(self.per_seed))

    @property
    def stderr(self) -> float:
        if len(self.per_seed) < 2:
            return float("nan")
        return float(np.std(self.per_seed, ddof=1) / math.sqrt(len(self.per_seed)))

    def to_json(self) -> dict:
        return {"metric": self.metric, "per_seed": self.per_seed, "mean": self.mean,
                "stderr": self.stderr, "n_samples": self.n_samples}


def evaluate(policy: Policy, baseline: Policy | None, reward: RewardSource, contexts,
             n_contexts: int, seeds: Seq[int], temperature=1.0, top_p=1.0) -> EvalReport:
    """Winrate against ``baseline`` (scored reward) or pass-rate (verifiable reward)."""
    vals = []
    for s in seeds:
        if reward.kind == "verifiable":
            vals.append(pass_rate(policy, reward, contexts, n_contexts, s, temperature, top_p))
        else:
            if baseline is None:
                raise ValueError("winrate needs a baseline policy")
            vals.append(winrate(policy, baseline, reward, contexts, n_contexts, s,
                                temperature, top_p))
    metric = "pass_rate" if reward.kind == "verifiable" else "winrate"
    return EvalReport(metric, vals, n_contexts * len(seeds))


@dataclass
class RunResult:
    variant: str
    seed: int
    history: list[dict]
    policy: Policy
    final_reward: float
    initial_reward: float


def run_variant(cfg: RunConfig, seed: int, corpus=None, on_step=None,
                base: Policy | None = None) -> RunResult:
    """Train one variant for one seed and measure its final true reward."""
    reward = reward_source(cfg)
    contexts = cfg.task.contexts()
    base = base_policy(cfg, seed) if base is None else base
    hl = cfg.effective_humanline()
    state = TrainState.create(base.clone(), cfg.optimizer, seed, cfg.train.steps,
                              cfg.variant, cfg.to_dict())
    t = cfg.train
    eval_n = cfg.eval.n_contexts

    def eval_fn(p):
        return expected_reward(p, reward, contexts, eval_n, seed + 10**6,
                               cfg.eval.temperature, cfg.eval.top_p)

    common = dict(loss_cfg=cfg.loss, humanline_cfg=hl,
                  trust_region_period=t.trust_region_period,
                  eval_fn=eval_fn if t.eval_every else None,
                  eval_every=t.eval_every, collapse_patience=t.collapse_patience,
                  on_step=on_step)
    initial = eval_fn(base)
    if cfg.is_online:
        history = run_online(state, reward, contexts, t.steps, t.batch_size, t.sample_period,
                             G=t.G, tau=t.tau, group_mode=t.group_mode,
                             temperature=t.temperature, top_p=t.top_p,
                             oversample=t.oversample, **common)
    else:
        if corpus is None:
            if cfg.data.corpus_path:
                corpus = read_corpus(cfg.data.corpus_path)
            else:
                corpus, _ = build_corpus(cfg, seed, base)
        history = run_offline(state, corpus, t.steps, t.batch_size, **common)
    return RunResult(cfg.variant, seed, history, state.policy, eval_fn(state.policy), initial)


def run_suite(cfg: RunConfig, variants: Seq[str], seeds: Seq[int],
              configs: dict | None = None) -> dict[str, list[RunResult]]:
    """Run every variant on every seed, sharing the base policy and corpus per seed.

    ``configs`` optionally maps a label to a fully specified config; labels
    then replace variant names as keys.
    """
    plan = dict(configs) if configs else {v: cfg.with_variant(v) for v in variants}
    out: dict[str, list[RunResult]] = {k: [] for k in plan}
    for seed in seeds:
        base = base_policy(cfg, seed)
        corpus = None
        for label, c in plan.items():
            if not c.is_online and corpus is None:
                corpus, _ = build_corpus(c, seed, base)
            res = run_variant(c, seed, corpus if not c.is_online else None, base=base)
            res.variant = label
            out[label].append(res)
    return out


def final_rewards(results: dict[str, list[RunResult]]) -> dict[str, np.ndarray]:
    return {k: np.array([r.final_reward for r in v]) for k, v in results.items()}


def paired_one_sided(better: np.ndarray, worse: np.ndarray) -> float:
    """p-value of a one-sided paired t-test that ``better > worse``."""
    d = np.asarray(better) - np.asarray(worse)
    if np.allclose(d, d[0]):
        return 0.0 if d[0] > 0 else 1.0
    return float(stats.ttest_rel(better, worse, alternative="greater").pvalue)


def pooled_stderr(a: np.ndarray, b: np.ndarray) -> float:
    """Standard error of the difference of two seed means."""
    return float(math.sqrt(np.var(a, ddof=1) / len(a) + np.var(b, ddof=1) / len(b)))


def write_history(path, history: list[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for row in history:
            f.write(json.dumps(row, sort_keys=True) + "\n")
