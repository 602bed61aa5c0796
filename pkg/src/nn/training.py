import logging
from dataclasses import dataclass, field
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, Field
from tqdm import tqdm

from src.config import get_settings
from src.engine import Adam, LrSchedule, Tensor, backward, no_grad, ops
from src.errors import ConfigError, NumericError

from .data import LabeledImages
from .layers import ForwardContext
from .models import ModelGraph

logger = logging.getLogger(__name__)


class TrainConfig(BaseModel):
    epochs: int = Field(default=16, ge=0)
    batch_size: int = Field(default=64, ge=2)
    lr: float = Field(default=0.01, ge=0)
    lr_schedule: Literal["constant", "cosine"] = "cosine"
    seed: int = 0
    shuffle: bool = True


@dataclass
class TrainHistory:
    losses: list[float] = field(default_factory=list)
    
    @property
    def first(self) -> float:
        return self.losses[0] if self.losses else float("nan")
    
    @property
    def last(self) -> float:
        return self.losses[-1] if self.losses else float("nan")


def _check_dataset(model: ModelGraph, dataset: LabeledImages) -> None:
    arch = model.arch
    expected = (arch.in_channels, arch.input_size, arch.input_size)
    if dataset.image_shape != expected:
        raise ConfigError(f"Dataset images {dataset.image_shape} do not match arch input {expected}")
    if len(dataset) and (dataset.labels.min() < 0 or dataset.labels.max() >= arch.num_classes):
        raise ConfigError(f"Labels must lie in [0, {arch.num_classes})")


def pretrain_with_history(
    model: ModelGraph,
    dataset: LabeledImages,
    cfg: TrainConfig
) -> tuple[ModelGraph, TrainHistory]:
    _check_dataset(model, dataset)
    settings = get_settings()
    rng = np.random.default_rng(cfg.seed)
    optimizer = Adam(model.parameters(), lr=cfg.lr)
    history = TrainHistory()
    
    model.set_trainable(True).train()
    ctx = ForwardContext(training=True)
    steps_per_epoch = -(-len(dataset) // cfg.batch_size)
    schedule = (
        LrSchedule.cosine(cfg.lr, cfg.epochs * steps_per_epoch)
        if cfg.lr_schedule == "cosine" else LrSchedule.constant(cfg.lr)
    )
    step = 0
    
    with tqdm(
        total=cfg.epochs * steps_per_epoch,
        desc="pretrain",
        disable=not settings.show_progress
    ) as bar:
        for epoch in range(cfg.epochs):
            for images, labels in dataset.batches(cfg.batch_size, cfg.shuffle, rng):
                if len(images) < 2:
                    continue
                optimizer.zero_grad()
                logits = model.forward(Tensor(images), ctx)
                loss = ops.cross_entropy(logits, labels)
                value = loss.item()
                if not np.isfinite(value):
                    logger.error(f"Pretraining diverged at step {step}")
                    raise NumericError("Pretraining loss is not finite", step=step)
                backward(loss)
                optimizer.step()
                optimizer.lr = schedule.step()
                history.losses.append(value)
                step += 1
                bar.update(1)
                if step % 100 == 0:
                    bar.set_description(f"pretrain loss={value:.4f}")
            logger.info(f"Epoch {epoch + 1}/{cfg.epochs}: last loss {history.last:.4f}")
            
    return model.eval(), history


def pretrain(model: ModelGraph, dataset: LabeledImages, cfg: TrainConfig) -> ModelGraph:
    """Train with Adam + cross-entropy; returns the model in eval mode."""
    model, _ = pretrain_with_history(model, dataset, cfg)
    return model


def predict(model, images: np.ndarray, batch_size: int = 256, ctx: Optional[ForwardContext] = None) -> np.ndarray:
    """Argmax predictions for any callable model exposing ``forward(x, ctx)``."""
    preds = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            logits = model.forward(Tensor(images[start:start + batch_size]), ctx or ForwardContext())
            preds.append(logits.data.argmax(axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def evaluate(model, dataset: LabeledImages, batch_size: int = 256) -> float:
    """Top-1 accuracy in percent, rounded to two decimals."""
    if len(dataset) == 0:
        return 0.0
    preds = predict(model, dataset.images, batch_size)
    return round(float((preds == dataset.labels).mean() * 100.0), 2)
