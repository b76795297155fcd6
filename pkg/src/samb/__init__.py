"""Group-token transformers with semantic-aware masked message passing for
unsupervised domain adaptation, exercised on synthetic domain-shifted data."""

from .attention import (AttentionMaskPair, GroupAssignment, GumbelConfig,
                        MessagePassingMode, gumbel_assign, handcrafted_mask,
                        masked_attention, mode_masks)
from .model import ModelConfig, VitSamb
from .tensor import Tensor, backward, clear_tape
from .trainer import Scheme, TrainConfig, Trainer, evaluate

__all__ = [
    "AttentionMaskPair", "GroupAssignment", "GumbelConfig", "MessagePassingMode",
    "gumbel_assign", "handcrafted_mask", "masked_attention", "mode_masks",
    "ModelConfig", "VitSamb", "Tensor", "backward", "clear_tape",
    "Scheme", "TrainConfig", "Trainer", "evaluate",
]
