"""Run configuration: one JSON file drives every command."""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .data import SortTask
from .humanline import HumanlineConfig
from .objectives import LossConfig
from .trainer import OptimizerConfig

VARIANTS = ("offline", "online", "offline+humanline", "online+humanline")
SAMPLERS = ("base", "worse", "better")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PolicyConfig:
    n: int = 2
    init_scale: float = 0.5
    max_len: int = 8


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 200
    batch_size: int = 8
    sample_period: int = 1
    G: int = 8
    tau: float = 0.01
    temperature: float = 0.7
    top_p: float = 0.95
    group_mode: str = "pairs"
    oversample: float = 1.0
    trust_region_period: int | None = None
    eval_every: int = 0
    collapse_patience: int | None = 50

    def __post_init__(self):
        if self.group_mode not in ("pairs", "full"):
            raise ConfigError("train.group_mode must be 'pairs' or 'full'")
        if self.steps < 1 or self.batch_size < 1 or self.sample_period < 1:
            raise ConfigError("steps, batch_size and sample_period must be >= 1")


@dataclass(frozen=True)
class DataConfig:
    sampler: str = "worse"
    sampler_noise: float = 1.0
    better_steps: int = 150
    corpus_size: int | None = None
    corpus_path: str | None = None

    def __post_init__(self):
        if self.sampler not in SAMPLERS:
            raise ConfigError(f"data.sampler must be one of {SAMPLERS}")


@dataclass(frozen=True)
class EvalConfig:
    n_contexts: int = 256
    temperature: float = 1.0
    top_p: float = 1.0
    baseline_checkpoint: str | None = None
    checkpoint: str | None = None


@dataclass(frozen=True)
class RunConfig:
    task: SortTask = field(default_factory=SortTask)
    reward: str = "scored"
    objective: str = "dpo"
    variant: str = "offline"
    seeds: tuple[int, ...] = (0,)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    humanline: HumanlineConfig = field(default_factory=HumanlineConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    sweep: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.reward not in ("scored", "verifiable"):
            raise ConfigError("reward must be 'scored' or 'verifiable'")
        if self.loss.objective != self.objective:
            object.__setattr__(self, "loss", replace(self.loss, objective=self.objective))
        if self.variant.startswith("offline") and self.train.sample_period != 1:
            raise ConfigError("offline variants do not resample; leave train.sample_period at 1")

    @property
    def is_online(self) -> bool:
        return self.variant.startswith("online")

    @property
    def uses_humanline(self) -> bool:
        return self.variant.endswith("+humanline")

    def effective_humanline(self) -> HumanlineConfig:
        return self.humanline if self.uses_humanline else HumanlineConfig.disabled()

    def with_variant(self, variant: str) -> "RunConfig":
        """Same run under another variant, re-applying that variant's preset."""
        if self.raw:
            return config_from_dict({**self.raw, "variant": variant})
        return replace(self, variant=variant)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("raw")
        d["seeds"] = list(self.seeds)
        return d


_SECTIONS = {
    "task": SortTask,
    "policy": PolicyConfig,
    "loss": LossConfig,
    "humanline": HumanlineConfig,
    "optimizer": OptimizerConfig,
    "train": TrainConfig,
    "data": DataConfig,
    "eval": EvalConfig,
}


def _build(cls, values: dict, section: str):
    if not isinstance(values, dict):
        raise ConfigError(f"section {section!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {sorted(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{section}: {e}") from None


def merge_dicts(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge_dicts(out[k], v)
        else:
            out[k] = v
    return out


def config_from_dict(d: dict) -> RunConfig:
    """Build a :class:`RunConfig`; a ``presets`` table keyed by variant overlays its entry."""
    raw = copy.deepcopy(d)
    d = dict(d)
    presets = d.pop("presets", {}) or {}
    variant = d.get("variant", "offline")
    if variant in presets:
        d = merge_dicts(d, presets[variant])
    kwargs = {}
    for key, value in d.items():
        if key in _SECTIONS:
            kwargs[key] = _build(_SECTIONS[key], value, key)
        elif key == "seeds":
            kwargs[key] = tuple(int(s) for s in value)
        elif key in ("reward", "objective", "variant", "sweep"):
            kwargs[key] = value
        else:
            raise ConfigError(f"unknown top-level key {key!r}")
    try:
        return RunConfig(**kwargs, raw=raw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None


def load_config(path, overrides: dict | None = None) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from None
    if overrides:
        raw = merge_dicts(raw, overrides)
    return config_from_dict(raw)
