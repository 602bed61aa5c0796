from .checkpoint import Checkpoint, load_checkpoint, load_model, save_checkpoint, save_model
from .data import LabeledImages, load_dataset, load_idx_dataset, make_desk_dataset
from .layers import ForwardContext, Module
from .models import (
    ArchConfig,
    LayerSpec,
    ModelGraph,
    TapRecord,
    TapRequest,
    build_model,
    forward_block,
    forward_with_taps,
    load_arch,
)
from .training import TrainConfig, evaluate, pretrain, pretrain_with_history

__all__ = [
    "ArchConfig",
    "Checkpoint",
    "ForwardContext",
    "LabeledImages",
    "LayerSpec",
    "ModelGraph",
    "Module",
    "TapRecord",
    "TapRequest",
    "TrainConfig",
    "build_model",
    "evaluate",
    "forward_block",
    "forward_with_taps",
    "load_arch",
    "load_checkpoint",
    "load_dataset",
    "load_idx_dataset",
    "load_model",
    "make_desk_dataset",
    "pretrain",
    "pretrain_with_history",
    "save_checkpoint",
    "save_model",
]
