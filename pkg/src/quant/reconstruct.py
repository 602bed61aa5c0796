import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from tqdm import tqdm

from src.config import get_settings
from src.engine import Adam, LrSchedule, Tensor, backward, no_grad, ops
from src.errors import ConfigError, NumericError
from src.nn.models import ModelGraph, forward_block

from .primitives import beta_at, rounding_reg
from .qmodel import QuantizedModel, QuantPolicy, QuantVariant, resolve_policy

logger = logging.getLogger(__name__)

EVAL_CHUNK = 256


class ReconConfig(BaseModel):
    bits_w: int = Field(default=4, ge=2, le=8)
    bits_a: int = Field(default=4, ge=2, le=8)
    lam: float = Field(default=1.0, ge=0, alias="lambda")
    beta_start: float = 20.0
    beta_end: float = 2.0
    warmup_frac: float = Field(default=0.2, ge=0, lt=1)
    steps: int = Field(default=2000, ge=0)
    batch_size: int = Field(default=32, ge=1)
    lr_s_w: float = Field(default=1e-4, ge=0)
    lr_v: float = Field(default=1e-3, ge=0)
    lr_s_a: float = Field(default=4e-5, ge=0)
    qdrop_prob: float = Field(default=0.5, ge=0, le=1)
    first_last_8bit: bool = True
    policy: Optional[QuantPolicy] = None
    variant: QuantVariant = QuantVariant.GENIE
    p_ord: float = Field(default=2.0, gt=0)
    seed: int = 0
    
    model_config = ConfigDict(populate_by_name=True)
    
    @model_validator(mode="after")
    def _check_beta(self) -> "ReconConfig":
        if not self.beta_start > self.beta_end > 0:
            raise ValueError(f"Need beta_start > beta_end > 0, got {self.beta_start} / {self.beta_end}")
        return self
    
    @property
    def resolved_policy(self) -> QuantPolicy:
        return resolve_policy(self.policy, self.first_last_8bit)


@dataclass
class BlockReport:
    block: int
    mse_before: float
    mse_after: float
    binarized: float
    losses: list[float] = field(default_factory=list)


def _calib_images(calib) -> np.ndarray:
    images = getattr(calib, "images", calib)
    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 4 or len(images) == 0:
        raise ConfigError(f"Calibration images must be a non-empty NCHW array, got shape {images.shape}")
    return images


def _run_chunked(fn, inputs: np.ndarray) -> np.ndarray:
    outs = []
    with no_grad():
        for start in range(0, len(inputs), EVAL_CHUNK):
            outs.append(fn(Tensor(inputs[start:start + EVAL_CHUNK])).data)
    return np.concatenate(outs)


def teacher_block_outputs(teacher: ModelGraph, block_idx: int, inputs: np.ndarray) -> np.ndarray:
    return _run_chunked(lambda x: forward_block(teacher, block_idx, x), inputs)


def student_block_outputs(student: QuantizedModel, block_idx: int, inputs: np.ndarray) -> np.ndarray:
    return _run_chunked(lambda x: student.forward_block(block_idx, x), inputs)


def _hard_block_mse(student: QuantizedModel, block_idx: int, inputs: np.ndarray, targets: np.ndarray) -> float:
    """Elementwise MSE of the block with its current rounding decisions fixed."""
    with student.hard_rounding():
        outputs = student_block_outputs(student, block_idx, inputs)
    return float(np.mean((outputs - targets) ** 2))


def _reconstruction_loss(out: Tensor, target: np.ndarray) -> Tensor:
    """Squared error summed per sample, averaged over the batch."""
    diff = ops.sub(out, Tensor(target, dtype=out.dtype))
    return ops.div(ops.sum(ops.mul(diff, diff)), float(out.shape[0]))


def reconstruct_block(
    teacher: ModelGraph,
    student: QuantizedModel,
    block_idx: int,
    calib,
    cfg: ReconConfig,
    student_inputs: Optional[np.ndarray] = None,
    teacher_inputs: Optional[np.ndarray] = None,
    rng: Optional[np.random.Generator] = None
) -> BlockReport:
    """Fit one block's quantization parameters to the full-precision block output.

    ``teacher_inputs`` are the full-precision inputs of the block and
    ``student_inputs`` the outputs of the already quantized predecessors; both
    default to the calibration images, which is correct for block 0.
    """
    if not 0 <= block_idx < len(teacher.block_boundaries):
        raise IndexError(f"Block index {block_idx} out of range (0..{len(teacher.block_boundaries) - 1})")
    images = _calib_images(calib)
    teacher_inputs = images if teacher_inputs is None else teacher_inputs
    student_inputs = images if student_inputs is None else student_inputs
    rng = rng or np.random.default_rng(cfg.seed + block_idx)
    
    student.set_qdrop(None, 0.0, None)
    targets = teacher_block_outputs(teacher, block_idx, teacher_inputs)
    block_params = student.block_params(block_idx)
    
    # activation steps come from the first calibration batch
    with no_grad():
        student.forward_block(block_idx, Tensor(student_inputs[:cfg.batch_size]))
    mse_before = _hard_block_mse(student, block_idx, student_inputs, targets)
    
    steps_w = [qp.weight.s_w for qp in block_params if qp.weight.s_w.requires_grad]
    soft_bits = [qp.weight.v for qp in block_params if qp.weight.v is not None]
    steps_a = [p for qp in block_params if qp.act is not None for p in qp.act.parameters()]
    groups = [
        (Adam(params, lr=lr), LrSchedule.cosine(lr, cfg.steps) if cosine else LrSchedule.constant(lr))
        for params, lr, cosine in (
            (steps_w, cfg.lr_s_w, True),
            (soft_bits, cfg.lr_v, False),
            (steps_a, cfg.lr_s_a, True),
        )
        if params
    ]
    
    losses: list[float] = []
    if block_params and cfg.steps > 0:
        student.set_qdrop(block_idx, cfg.qdrop_prob, rng)
        show = get_settings().show_progress
        with tqdm(total=cfg.steps, desc=f"block {block_idx}", disable=not show, leave=False) as bar:
            for step in range(cfg.steps):
                idx = rng.choice(len(student_inputs), size=min(cfg.batch_size, len(student_inputs)), replace=False)
                for opt, _ in groups:
                    opt.zero_grad()
                out = student.forward_block(block_idx, Tensor(student_inputs[idx]))
                loss = _reconstruction_loss(out, targets[idx])
                beta, active = beta_at(step, cfg.steps, cfg.beta_start, cfg.beta_end, cfg.warmup_frac)
                if active and cfg.lam > 0:
                    for v in soft_bits:
                        loss = ops.add(loss, ops.mul(rounding_reg(v, beta), cfg.lam))
                value = loss.item()
                if not np.isfinite(value):
                    logger.error(f"Reconstruction loss is {value} in block {block_idx} at step {step}")
                    raise NumericError(f"Reconstruction loss of block {block_idx} is not finite", step=step)
                backward(loss)
                for opt, schedule in groups:
                    opt.step()
                    opt.lr = schedule.step()
                for qp in block_params:
                    qp.weight.clamp_step()
                    if qp.act is not None:
                        qp.act.clamp_step()
                losses.append(value)
                bar.update(1)
                if (step + 1) % 100 == 0:
                    bar.set_description(f"block {block_idx} loss={value:.4f}")
        student.set_qdrop(None, 0.0, None)
        
    mse_after = _hard_block_mse(student, block_idx, student_inputs, targets)
    binarized = (
        float(np.mean([qp.weight.binarized_fraction() for qp in block_params])) if block_params else 1.0
    )
    logger.info(
        f"Block {block_idx}: MSE {mse_before:.6f} -> {mse_after:.6f}, "
        f"h(V) binarized {binarized:.4f} ({len(block_params)} layers)"
    )
    return BlockReport(block_idx, mse_before, mse_after, binarized, losses)


def quantize_model(
    teacher: ModelGraph,
    calib,
    cfg: ReconConfig
) -> tuple[QuantizedModel, list[BlockReport]]:
    """Reconstruct every block in order; returns the soft model and per-block reports.

    Call ``finalize`` on the result to harden the rounding.
    """
    images = _calib_images(calib)
    student = QuantizedModel.build(
        teacher, cfg.bits_w, cfg.bits_a, cfg.resolved_policy, cfg.variant, cfg.p_ord
    )
    rng = np.random.default_rng(cfg.seed)
    teacher_inputs = images
    student_inputs = images
    reports = []
    for block_idx in range(len(teacher.block_boundaries)):
        reports.append(reconstruct_block(
            teacher, student, block_idx, images, cfg,
            student_inputs=student_inputs, teacher_inputs=teacher_inputs, rng=rng,
        ))
        teacher_inputs = teacher_block_outputs(teacher, block_idx, teacher_inputs)
        student_inputs = student_block_outputs(student, block_idx, student_inputs)
    return student, reports
