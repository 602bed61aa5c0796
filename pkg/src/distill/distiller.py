import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Iterator, Optional

import numpy as np
from pydantic import BaseModel, Field
from tqdm import tqdm

from src.config import get_settings
from src.engine import Adam, LrSchedule, Tensor, backward, no_grad
from src.errors import ConfigError, NumericError
from src.nn.checkpoint import load_checkpoint, save_checkpoint
from src.nn.models import ModelGraph, TapRequest, forward_with_taps, model_hash

from .generator import Generator, GeneratorConfig, generate
from .losses import bns_loss
from .swing import SwingConfig

logger = logging.getLogger(__name__)


class DistillMode(str, Enum):
    GENIE = "genie"
    ZEROQ = "zeroq"
    GBA = "gba"


class DistillConfig(BaseModel):
    mode: DistillMode = DistillMode.GENIE
    swing: bool = True
    gen_lr: float = Field(default=0.01, gt=0)
    gen_gamma: float = Field(default=0.95, gt=0, le=1)
    gen_every_n: int = Field(default=100, ge=1)
    z_lr: float = Field(default=0.1, gt=0)
    pixel_lr: float = Field(default=0.1, gt=0)
    plateau_factor: float = Field(default=0.5, gt=0, lt=1)
    plateau_patience: int = Field(default=50, ge=1)
    plateau_min_lr: float = Field(default=1e-4, gt=0)
    generator: GeneratorConfig = Field(default_factory=GeneratorConfig)


@dataclass
class DistillState:
    """Everything one batch optimizes: generator, latents, optimizers, schedules.

    For the direct (pixel) mode ``gen`` is None and ``z`` holds the images;
    for the generator-only mode ``opt_z`` is None and ``z`` is resampled.
    """

    z: Tensor
    gen: Optional[Generator]
    opt_gen: Optional[Adam]
    opt_z: Optional[Adam]
    sched_gen: Optional[LrSchedule]
    sched_z: Optional[LrSchedule]
    swing: SwingConfig
    z_rng: np.random.Generator
    horizon: int
    t: int = 0
    trace: list[float] = field(default_factory=list)
    
    def images(self) -> Tensor:
        if self.gen is None:
            return self.z
        return generate(self.gen, self.z)


@dataclass
class DistillResult:
    images: np.ndarray
    trace: list[float]
    
    @property
    def initial_loss(self) -> float:
        return self.trace[0] if self.trace else float("nan")
    
    @property
    def final_loss(self) -> float:
        return self.trace[-1] if self.trace else float("nan")


@dataclass
class DistilledDataset:
    images: np.ndarray
    traces: list[list[float]]
    metadata: dict[str, Any] = field(default_factory=dict)
    
    def __len__(self) -> int:
        return int(self.images.shape[0])
    
    def trace_rows(self) -> Iterator[tuple[int, int, float]]:
        for batch, trace in enumerate(self.traces):
            for it, loss in enumerate(trace):
                yield batch, it, loss
                
    def save(self, path: Path | str) -> Path:
        tensors = {
            "images": np.ascontiguousarray(self.images, dtype=np.float32),
            "trace": np.asarray(self.traces, dtype=np.float64).reshape(len(self.traces), -1),
        }
        return save_checkpoint(tensors, path, {"kind": "distilled", **self.metadata})
    
    @classmethod
    def load(cls, path: Path | str) -> "DistilledDataset":
        ckpt = load_checkpoint(path)
        if ckpt.metadata.get("kind") != "distilled":
            raise ConfigError(f"{path} does not hold a distilled dataset")
        metadata = {k: v for k, v in ckpt.metadata.items() if k != "kind"}
        traces = [row.tolist() for row in ckpt.tensors["trace"]]
        return cls(ckpt.tensors["images"], traces, metadata)


def _image_shape(model: ModelGraph) -> tuple[int, int, int]:
    return model.arch.in_channels, model.arch.input_size, model.arch.input_size


def init_distill_state(
    model: ModelGraph,
    batch_size: int,
    iters: int,
    seed: int,
    cfg: Optional[DistillConfig] = None
) -> DistillState:
    """Fresh per-batch state; generator init, latents and swing offsets use disjoint streams."""
    cfg = cfg or DistillConfig()
    gen_seq, z_seq, swing_seq = np.random.SeedSequence(seed).spawn(3)
    z_rng = np.random.default_rng(z_seq)
    swing = SwingConfig.seeded(swing_seq, enabled=cfg.swing)
    
    if cfg.mode is DistillMode.ZEROQ:
        pixels = Tensor(z_rng.standard_normal((batch_size, *_image_shape(model))).astype(np.float32), requires_grad=True)
        return DistillState(
            z=pixels, gen=None, opt_gen=None,
            opt_z=Adam([pixels], lr=cfg.pixel_lr), sched_gen=None,
            sched_z=LrSchedule.reduce_on_plateau(cfg.pixel_lr, cfg.plateau_factor, cfg.plateau_patience, cfg.plateau_min_lr),
            swing=swing, z_rng=z_rng, horizon=iters,
        )
        
    gen_cfg = cfg.generator.model_copy(update={
        "out_size": model.arch.input_size,
        "out_channels": model.arch.in_channels,
    })
    gen = Generator(gen_cfg, np.random.default_rng(gen_seq))
    learn_z = cfg.mode is DistillMode.GENIE
    z = Tensor(z_rng.standard_normal((batch_size, gen_cfg.latent_dim)).astype(np.float32), requires_grad=learn_z)
    return DistillState(
        z=z,
        gen=gen,
        opt_gen=Adam(gen.parameters(), lr=cfg.gen_lr),
        opt_z=Adam([z], lr=cfg.z_lr) if learn_z else None,
        sched_gen=LrSchedule.exponential(cfg.gen_lr, cfg.gen_gamma, cfg.gen_every_n),
        sched_z=(
            LrSchedule.reduce_on_plateau(cfg.z_lr, cfg.plateau_factor, cfg.plateau_patience, cfg.plateau_min_lr)
            if learn_z else None
        ),
        swing=swing,
        z_rng=z_rng,
        horizon=iters,
    )


def bns_objective(model: ModelGraph, images: Tensor, swing: Optional[SwingConfig] = None) -> Tensor:
    """BNS loss of a synthetic batch; BN layers normalize with the batch statistics."""
    _, record = forward_with_taps(model, images, TapRequest(bn_stats=True, swing=swing))
    return bns_loss(record, model.bn_running_stats())


def distill_step(model: ModelGraph, state: DistillState) -> float:
    if state.opt_z is None and state.gen is not None:
        state.z = Tensor(state.z_rng.standard_normal(state.z.shape).astype(np.float32))
    for opt in (state.opt_gen, state.opt_z):
        if opt is not None:
            opt.zero_grad()
            
    loss = bns_objective(model, state.images(), state.swing if state.swing.enabled else None)
    value = loss.item()
    if not np.isfinite(value):
        logger.error(f"BNS loss is {value} at iteration {state.t}")
        raise NumericError("BNS loss is not finite", step=state.t)
    backward(loss)
    
    if state.opt_gen is not None:
        state.opt_gen.step()
        state.opt_gen.lr = state.sched_gen.step()
    if state.opt_z is not None:
        state.opt_z.step()
        state.opt_z.lr = state.sched_z.step(value)
    state.trace.append(value)
    state.t += 1
    return value


def distill_batch_with_trace(
    model: ModelGraph,
    batch_size: int,
    iters: int,
    seed: int,
    cfg: Optional[DistillConfig] = None,
    progress: bool = True
) -> DistillResult:
    cfg = cfg or DistillConfig()
    if not model.bn_layers():
        raise ConfigError("Distillation needs a model with batch-norm layers")
    model.eval().set_trainable(False)
    state = init_distill_state(model, batch_size, iters, seed, cfg)
    
    show = progress and get_settings().show_progress
    with tqdm(total=iters, desc=f"distill[{cfg.mode.value}]", disable=not show, leave=False) as bar:
        for _ in range(iters):
            value = distill_step(model, state)
            bar.update(1)
            if state.t % 100 == 0:
                bar.set_description(f"distill[{cfg.mode.value}] loss={value:.4f}")
                logger.debug(f"seed {seed} iter {state.t}: BNS loss {value:.6f}")
                
    with no_grad():
        images = state.images().data.astype(np.float32, copy=True)
    if state.trace:
        logger.info(
            f"Distilled batch (seed {seed}, mode {cfg.mode.value}): "
            f"BNS loss {state.trace[0]:.4f} -> {state.trace[-1]:.4f}"
        )
    return DistillResult(images, state.trace)


def distill_batch(
    model: ModelGraph,
    batch_size: int,
    iters: int,
    seed: int,
    cfg: Optional[DistillConfig] = None
) -> Tensor:
    """Distill one batch and return its images, detached."""
    return Tensor(distill_batch_with_trace(model, batch_size, iters, seed, cfg).images)


def distill_dataset(
    model: ModelGraph,
    num_images: int,
    batch_size: int = 128,
    iters: int = 500,
    base_seed: int = 0,
    cfg: Optional[DistillConfig] = None,
    batches: Optional[list[int]] = None
) -> DistilledDataset:
    """Distill ``num_images`` images in independent batches.

    Batch k uses seed ``base_seed ^ k`` and a freshly initialized generator, so
    its images do not depend on which other batches run or on thread count.
    ``batches`` restricts the run to a subset of batch indices.
    """
    cfg = cfg or DistillConfig()
    if num_images < 1 or num_images % batch_size:
        raise ConfigError(f"num_images ({num_images}) must be a positive multiple of batch_size ({batch_size})")
    indices = list(range(num_images // batch_size)) if batches is None else list(batches)
    model.eval().set_trainable(False)
    workers = max(1, min(get_settings().threads, len(indices)))
    logger.info(f"Distilling {len(indices)} batches of {batch_size} ({cfg.mode.value}, swing={cfg.swing}) on {workers} threads")
    
    def _run(k: int) -> DistillResult:
        try:
            return distill_batch_with_trace(model, batch_size, iters, base_seed ^ k, cfg, progress=workers == 1)
        except NumericError as e:
            raise NumericError(e.detail, step=e.step, batch=k) from e
        
    if workers == 1:
        results = [_run(k) for k in indices]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run, indices))
            
    metadata = {
        "mode": cfg.mode.value,
        "swing": cfg.swing,
        "seed": base_seed,
        "iters": iters,
        "batch_size": batch_size,
        "num_images": batch_size * len(indices),
        "batches": indices,
        "model_hash": model_hash(model),
    }
    return DistilledDataset(
        images=np.concatenate([r.images for r in results]),
        traces=[r.trace for r in results],
        metadata=metadata,
    )


def baseline_distill_direct(
    model: ModelGraph,
    num_images: int,
    iters: int,
    seed: int = 0,
    batch_size: Optional[int] = None,
    swing: bool = False
) -> DistilledDataset:
    """Optimize pixels directly from Gaussian noise against the BNS loss."""
    cfg = DistillConfig(mode=DistillMode.ZEROQ, swing=swing)
    return distill_dataset(model, num_images, batch_size or num_images, iters, seed, cfg)


def baseline_distill_generator_only(
    model: ModelGraph,
    num_images: int,
    iters: int,
    seed: int = 0,
    batch_size: Optional[int] = None,
    swing: bool = False
) -> DistilledDataset:
    """Train only the generator on Gaussian latents resampled every step."""
    cfg = DistillConfig(mode=DistillMode.GBA, swing=swing)
    return distill_dataset(model, num_images, batch_size or num_images, iters, seed, cfg)
