import logging
from typing import Optional

import numpy as np
from pydantic import BaseModel, Field

from src.engine import Tensor
from src.errors import ConfigError, ShapeError
from src.nn.layers import (
    BatchNorm2d,
    Conv2d,
    ForwardContext,
    LeakyReLU,
    Linear,
    Module,
    Reshape,
    Tanh,
    Upsample,
    run_layers,
)

logger = logging.getLogger(__name__)


class GeneratorConfig(BaseModel):
    latent_dim: int = Field(default=256, ge=1)
    base_channels: int = Field(default=64, ge=1)
    out_channels: int = Field(default=3, ge=1)
    out_size: int = Field(default=32, ge=4)
    slope: float = 0.2


class Generator:
    """Latent vector -> image.

    linear -> reshape(C0, S/2, S/2) -> [upsample -> conv3x3 -> bn -> leaky_relu]
    -> conv3x3 to image channels -> tanh -> bn
    BN layers always normalize with the statistics of the current batch.
    """

    def __init__(self, cfg: Optional[GeneratorConfig] = None, rng: Optional[np.random.Generator] = None):
        cfg = cfg or GeneratorConfig()
        if cfg.out_size % 2:
            raise ConfigError(f"Generator output size must be even, got {cfg.out_size}")
        rng = rng or np.random.default_rng(0)
        c0, h0 = cfg.base_channels, cfg.out_size // 2
        self.cfg = cfg
        self.layers: list[Module] = [
            Linear(cfg.latent_dim, c0 * h0 * h0, rng),
            Reshape((c0, h0, h0)),
            Upsample(),
            Conv2d(c0, c0, 3, 1, 1, bias=False, rng=rng),
            BatchNorm2d(c0),
            LeakyReLU(cfg.slope),
            Conv2d(c0, cfg.out_channels, 3, 1, 1, bias=True, rng=rng),
            Tanh(),
            BatchNorm2d(cfg.out_channels),
        ]
        for idx, layer in enumerate(self.layers):
            layer.name = f"gen.{idx}"
            
    @property
    def latent_dim(self) -> int:
        return self.cfg.latent_dim
    
    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for _, p in layer.named_parameters()]
    
    def forward(self, z: Tensor) -> Tensor:
        return run_layers(self.layers, z, ForwardContext(batch_stats=True))


def generate(gen: Generator, z: Tensor) -> Tensor:
    if z.ndim != 2 or z.shape[1] != gen.latent_dim:
        raise ShapeError(f"Latent batch {z.shape} does not match latent_dim {gen.latent_dim}")
    return gen.forward(z)
