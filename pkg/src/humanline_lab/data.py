"""Synthetic sorting tasks with their reward sources and preference corpora."""

from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence as Seq

import numpy as np

from .objectives import records_to_groups, with_advantages
from .policy import Policy, Vocabulary, sample_batch
from .records import Group, PreferenceRecord

DIGITS = "0123456789abcdefghijklmnopqrstuvwxyz"

# format / accuracy weights (a tag-count reward has no analogue here)
FORMAT_WEIGHT = 1.0
ACCURACY_WEIGHT = 8.0

# sortedness, length proximity, diversity
SCORE_WEIGHTS = (0.4, 0.4, 0.2)


@dataclass(frozen=True)
class SortTask:
    """Prompts are digit strings; the right answer is the sorted string + eos."""

    n_digits: int = 5
    length: int = 3
    distinct: bool = True

    def __post_init__(self):
        if not 3 <= self.n_digits <= 36:
            raise ValueError("n_digits must be in [3, 36]")
        if self.length < 1 or (self.distinct and self.length > self.n_digits):
            raise ValueError("invalid prompt length")

    @property
    def eos(self) -> int:
        return self.n_digits

    @property
    def vocab(self) -> Vocabulary:
        return Vocabulary(self.n_digits + 1, self.eos, tuple(DIGITS[: self.n_digits]) + ("$",))

    def contexts(self) -> list[tuple[int, ...]]:
        digits = range(self.n_digits)
        if self.distinct:
            return list(itertools.permutations(digits, self.length))
        return list(itertools.product(digits, repeat=self.length))

    def target(self, x: Seq[int]) -> tuple[int, ...]:
        return tuple(sorted(x)) + (self.eos,)

    def content(self, y: Seq[int]) -> tuple[int, ...]:
        y = tuple(y)
        return y[:-1] if y and y[-1] == self.eos else y


def verifiable_reward(x: Seq[int], y: Seq[int], task: SortTask) -> dict:
    """Format and exact-match accuracy, combined with weights 1 and 8 into [0, 1]."""
    y = tuple(y)
    well_formed = (
        len(y) == len(x) + 1 and y[-1] == task.eos and task.eos not in y[:-1]
    )
    fmt = 1.0 if well_formed else 0.0
    acc = 1.0 if y == task.target(x) else 0.0
    total = (FORMAT_WEIGHT * fmt + ACCURACY_WEIGHT * acc) / (FORMAT_WEIGHT + ACCURACY_WEIGHT)
    return {"format": fmt, "accuracy": acc, "total": total}


def score_features(x: Seq[int], y: Seq[int], task: SortTask) -> tuple[float, float, float]:
    c = task.content(y)
    n = len(c)
    if n == 0:
        sortedness = 0.0
    elif n == 1:
        sortedness = 1.0
    else:
        sortedness = sum(a < b for a, b in zip(c, c[1:])) / (n - 1)
    target_len = len(x)
    length = max(0.0, 1.0 - abs(n - target_len) / target_len)
    diversity = len(set(c)) / n if n else 0.0
    return sortedness, length, diversity


def combine_features(features) -> float:
    return float(sum(w * f for w, f in zip(SCORE_WEIGHTS, features)))


def scored_reward(x: Seq[int], y: Seq[int], task: SortTask) -> float:
    """Smooth score in [0, 1]: sortedness, closeness to the prompt length, diversity."""
    return combine_features(score_features(x, y, task))


@dataclass(frozen=True)
class RewardSource:
    """Deterministic, bounded reward over ``(x, y)``."""

    kind: str
    task: SortTask

    def __post_init__(self):
        if self.kind not in ("verifiable", "scored"):
            raise ValueError(f"unknown reward kind {self.kind!r}")

    def __call__(self, x, y) -> float:
        if self.kind == "verifiable":
            return verifiable_reward(x, y, self.task)["total"]
        return scored_reward(x, y, self.task)

    def score_many(self, seqs) -> np.ndarray:
        return np.array([self(s.x, s.y) for s in seqs], dtype=float)

    def passed(self, x, y) -> bool:
        return tuple(y) == self.task.target(x)


# ----------------------------------------------------------------------
# sampling rounds


@dataclass
class RoundStats:
    contexts: int = 0
    kept: int = 0

    @property
    def filtered_fraction(self) -> float:
        return 0.0 if self.contexts == 0 else 1.0 - self.kept / self.contexts


def _sample_groups(policy, contexts, G, rng, temperature, top_p):
    expanded = [x for x in contexts for _ in range(G)]
    seqs = sample_batch(policy, expanded, rng, temperature, top_p)
    return [seqs[i * G:(i + 1) * G] for i in range(len(contexts))]


def online_round(
    policy: Policy,
    reward: RewardSource,
    contexts: Seq[Seq[int]],
    G: int,
    tau: float,
    rng: np.random.Generator,
    temperature: float = 0.7,
    top_p: float = 0.95,
    stats: RoundStats | None = None,
) -> list[PreferenceRecord]:
    """Sample ``G`` outputs per prompt and keep (best, worst) when the gap is ``>= tau``."""
    if G < 2:
        raise ValueError("G must be >= 2")
    if tau < 0:
        raise ValueError("tau must be >= 0")
    records = []
    for x, group in zip(contexts, _sample_groups(policy, contexts, G, rng, temperature, top_p)):
        scores = reward.score_many(group)
        i_best = int(np.argmax(scores))
        i_worst = int(np.argmin(scores))
        if scores[i_best] - scores[i_worst] >= tau and i_best != i_worst:
            records.append(PreferenceRecord(tuple(x), group[i_best].y, group[i_worst].y,
                                            float(scores[i_best]), float(scores[i_worst])))
    if stats is not None:
        stats.contexts += len(contexts)
        stats.kept += len(records)
    return records


def online_groups(
    policy: Policy,
    reward: RewardSource,
    contexts: Seq[Seq[int]],
    G: int,
    rng: np.random.Generator,
    temperature: float = 0.7,
    top_p: float = 1.0,
) -> list[Group]:
    """Full groups of ``G`` scored outputs per prompt, advantages attached."""
    out = []
    for x, group in zip(contexts, _sample_groups(policy, contexts, G, rng, temperature, top_p)):
        scores = reward.score_many(group)
        out.append(with_advantages(Group(tuple(x), [s.y for s in group], scores)))
    return out


def offline_groups(records: Seq[PreferenceRecord]) -> list[Group]:
    """Each preference pair becomes a group of two."""
    if not records:
        raise ValueError("no records")
    return records_to_groups(records)


# ----------------------------------------------------------------------
# corpora


@dataclass
class DatasetManifest:
    sampler_id: str
    task: dict
    reward_kind: str
    temperature: float
    top_p: float
    G: int
    tau: float
    seed: int
    n_contexts: int
    record_count: int = 0
    mean_reward: float = 0.0
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)


def make_offline_corpus(
    sampler: Policy,
    reward: RewardSource,
    contexts: Seq[Seq[int]],
    G: int,
    tau: float,
    seed: int,
    sampler_id: str = "base",
    temperature: float = 0.7,
    top_p: float = 0.95,
) -> tuple[list[PreferenceRecord], DatasetManifest]:
    """Run the online-round pipeline once, frozen to ``sampler``."""
    from .rng import stream

    rng = stream(seed, "data")
    records = online_round(sampler, reward, contexts, G, tau, rng, temperature, top_p)
    scores = [r for rec in records for r in (rec.r_w, rec.r_l)]
    manifest = DatasetManifest(
        sampler_id=sampler_id, task=asdict(reward.task), reward_kind=reward.kind,
        temperature=temperature, top_p=top_p, G=G, tau=tau, seed=int(seed),
        n_contexts=len(contexts), record_count=len(records),
        mean_reward=float(np.mean(scores)) if scores else 0.0,
    )
    return records, manifest


def corpus_filename(sampler_id: str, seed: int) -> str:
    return f"corpus_{sampler_id}_seed{seed}.jsonl"


def write_corpus(directory, records, manifest: DatasetManifest) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / corpus_filename(manifest.sampler_id, manifest.seed)
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps(r.to_json(), sort_keys=True) + "\n")
    manifest_path = path.with_suffix(".manifest.json")
    manifest_path.write_text(json.dumps(manifest.to_json(), sort_keys=True, indent=1) + "\n")
    return path


def read_corpus(path) -> list[PreferenceRecord]:
    out = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                out.append(PreferenceRecord.from_json(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise ValueError(f"{path}:{lineno}: malformed record ({e})") from None
    return out


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def mean_reward(records: Seq[PreferenceRecord]) -> float:
    vals = [v for r in records for v in (r.r_w, r.r_l) if v is not None]
    return float(np.mean(vals)) if vals else float("nan")


RewardFn = Callable[[Seq[int], Seq[int]], float]
