"""Candidate evaluation: the contract plus in-process implementations.

An evaluator maps (architecture, sparsity target) to a validation accuracy
and a structurally pruned architecture.  Two implementations ship here: a
closed-form deterministic proxy for exercising the search, and a native
numpy micro-trainer with structured pruning for desk-scale datasets.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol

from ..arch import ArchitectureTemplate


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str  # "sgdw" or "adamw"
    lr_schedule: tuple[tuple[int, float], ...]  # (start epoch, learning rate)
    momentum: float = 0.9
    weight_decay: float = 0.0


@dataclass(frozen=True)
class PruningConfig:
    target_sparsity: float = 0.0
    prune_start_epoch: int = 0
    prune_end_epoch: int = 0
    mask_update_every_steps: int | None = None  # None: once per epoch


@dataclass(frozen=True)
class AugmentConfig:
    shift_pixels: int = 0
    flip_lr: bool = False


@dataclass(frozen=True)
class TrainConfig:
    optimizer: OptimizerConfig
    epochs: int
    batch_size: int
    pruning: PruningConfig = field(default_factory=PruningConfig)
    augmentation: AugmentConfig = field(default_factory=AugmentConfig)
    seed: int = 0
    dropout_rate: float = 0.0  # applied before hidden dense layers when > 0


@dataclass(frozen=True)
class EvalResult:
    val_accuracy: float
    pruned_template: ArchitectureTemplate
    achieved_sparsity: float
    train_seconds: float
    test_accuracy: float | None = None


class Evaluator(Protocol):
    def evaluate(self, template: ArchitectureTemplate, sparsity_target: float) -> EvalResult:
        ...


def lr_at_epoch(schedule: tuple[tuple[int, float], ...], epoch: int) -> float:
    current = schedule[0][1]
    for start, lr in schedule:
        if epoch >= start:
            current = lr
    return current
