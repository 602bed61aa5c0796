"""Synthetic calibration data from batch-norm statistics."""

from .distiller import (
    DistillConfig,
    DistilledDataset,
    DistillMode,
    DistillResult,
    DistillState,
    baseline_distill_direct,
    baseline_distill_generator_only,
    bns_objective,
    distill_batch,
    distill_batch_with_trace,
    distill_dataset,
    init_distill_state,
)
from .generator import Generator, GeneratorConfig, generate
from .losses import bns_loss
from .swing import SwingConfig, swing_conv2d

__all__ = [
    "DistillConfig",
    "DistilledDataset",
    "DistillMode",
    "DistillResult",
    "DistillState",
    "Generator",
    "GeneratorConfig",
    "SwingConfig",
    "baseline_distill_direct",
    "baseline_distill_generator_only",
    "bns_loss",
    "bns_objective",
    "distill_batch",
    "distill_batch_with_trace",
    "distill_dataset",
    "generate",
    "init_distill_state",
    "swing_conv2d",
]
