"""Humanline alignment objectives on exact tabular policies."""

from .config import ConfigError, RunConfig, config_from_dict, load_config
from .humanline import HumanlineConfig, RatioBounds, humanline_clip, humanline_sample_mask
from .objectives import LossConfig, compute_loss, dpo_batch, grpo_batch, kto_batch
from .policy import Policy, Sequence, Vocabulary, sample, sample_batch
from .prospect import OutcomeDistribution, ProspectParams, capacity, utility, value, weights
from .records import Group, LabeledExample, PreferenceRecord
from .trainer import CollapseAbort, NumericalAbort, OptimizerConfig, TrainState, train_step

__version__ = "0.1.0"

__all__ = [
    "CollapseAbort", "ConfigError", "Group", "HumanlineConfig", "LabeledExample", "LossConfig",
    "NumericalAbort", "OptimizerConfig", "OutcomeDistribution", "Policy", "PreferenceRecord",
    "ProspectParams", "RatioBounds", "RunConfig", "Sequence", "TrainState", "Vocabulary",
    "capacity", "compute_loss", "config_from_dict", "dpo_batch", "grpo_batch", "humanline_clip",
    "humanline_sample_mask", "kto_batch", "load_config", "sample", "sample_batch", "train_step",
    "utility", "value", "weights",
]
