import json
import logging
from pathlib import Path
from typing import Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from src.config import get_settings
from src.distill.distiller import DistillConfig, DistillMode
from src.errors import ConfigError
from src.nn.training import TrainConfig
from src.quant.qmodel import QuantPolicy, QuantVariant
from src.quant.reconstruct import ReconConfig

logger = logging.getLogger(__name__)


class PretrainSection(TrainConfig):
    train_samples: int = Field(default=2000, ge=10)


class DistillSection(BaseModel):
    num_images: int = Field(default=1024, ge=1)
    batch_size: int = Field(default=128, ge=2)
    iters: int = Field(default=500, ge=0)
    swing: bool = True
    mode: DistillMode = DistillMode.GENIE
    
    @model_validator(mode="after")
    def _check_batches(self) -> "DistillSection":
        if self.num_images % self.batch_size:
            raise ValueError(f"num_images ({self.num_images}) must be a multiple of batch_size ({self.batch_size})")
        return self


class QuantSection(BaseModel):
    model_config = ConfigDict(populate_by_name=True)
    
    bits_w: int = Field(default=4, ge=2, le=8)
    bits_a: int = Field(default=4, ge=2, le=8)
    lam: float = Field(default=1.0, ge=0, alias="lambda")
    steps: int = Field(default=2000, ge=0)
    batch_size: int = Field(default=32, ge=1)
    qdrop_prob: float = Field(default=0.5, ge=0, le=1)
    first_last_8bit: bool = True
    policy: Optional[QuantPolicy] = None
    variant: QuantVariant = QuantVariant.GENIE
    init_norm: float = Field(default=2.0, gt=0, description="p_ord of the step-size initialization")


class AblationSection(BaseModel):
    rows: list[str] = Field(default_factory=lambda: [f"M{i}" for i in range(1, 8)])
    seeds: list[int] = Field(default_factory=lambda: [0])
    num_images_sweep: list[int] = Field(default_factory=lambda: [32, 64, 128, 256])
    p_ord_sweep: list[float] = Field(default_factory=lambda: [1.0, 2.0, 2.4, 3.0])


class RunConfig(BaseModel):
    arch: str = "resnet_tiny"
    seed: int = Field(default_factory=lambda: get_settings().default_seed)
    pretrain: PretrainSection = Field(default_factory=PretrainSection)
    distill: DistillSection = Field(default_factory=DistillSection)
    quant: QuantSection = Field(default_factory=QuantSection)
    eval_dataset: str = "desk-test"
    eval_samples: int = Field(default=1000, ge=1)
    out_dir: Path = Field(default_factory=lambda: get_settings().artifacts_dir)
    ablation: AblationSection = Field(default_factory=AblationSection)
    
    def distill_config(self, mode: Optional[DistillMode] = None, swing: Optional[bool] = None) -> DistillConfig:
        return DistillConfig(
            mode=mode or self.distill.mode,
            swing=self.distill.swing if swing is None else swing,
        )
    
    def recon_config(self, **overrides) -> ReconConfig:
        q = self.quant
        values = dict(
            bits_w=q.bits_w,
            bits_a=q.bits_a,
            lam=q.lam,
            steps=q.steps,
            batch_size=q.batch_size,
            qdrop_prob=q.qdrop_prob,
            first_last_8bit=q.first_last_8bit,
            policy=q.policy,
            variant=q.variant,
            p_ord=q.init_norm,
            seed=self.seed,
        )
        values.update(overrides)
        return ReconConfig(**values)


def load_run_config(path: Optional[Path | str] = None, **overrides) -> RunConfig:
    """Read a JSON run config; ``None`` gives the defaults. Validation errors become ConfigError."""
    data: dict = {}
    if path is not None:
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path} is not valid JSON: {e}") from e
    data.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"Invalid run config: {e}") from e
