"""Masked-autoregressive grid generation with a diffusion head, plus a
group-relative post-training pipeline, on a deliberately small scale."""

from .config import TrainConfig, UsageError, build_config
from .model import LatentGrid, MARModel, ModelSpec, SequencingError
from .rollout import RewardModel, RolloutRecord, group_advantages, rollout_group
from .loss import ObjectiveKnobs, assemble_objective, baseline_objective
from .schedules import MaskSchedule, NoiseSchedule
from .tensor import (DomainError, NumericError, ShapeError, Tensor,
                     TensorError, backward, clear_tape, no_grad)
from .train import eval_policy, pretrain, rl_train

__version__ = "0.1.0"

__all__ = [
    "TrainConfig", "UsageError", "build_config",
    "LatentGrid", "MARModel", "ModelSpec", "SequencingError",
    "RewardModel", "RolloutRecord", "group_advantages", "rollout_group",
    "ObjectiveKnobs", "assemble_objective", "baseline_objective",
    "MaskSchedule", "NoiseSchedule",
    "DomainError", "NumericError", "ShapeError", "Tensor", "TensorError",
    "backward", "clear_tape", "no_grad",
    "eval_policy", "pretrain", "rl_train",
    "__version__",
]
