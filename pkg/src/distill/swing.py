import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from src.engine import Tensor, ops
from src.errors import ConfigError, ShapeError

logger = logging.getLogger(__name__)


def swing_conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor],
    stride: int,
    padding: int,
    rng: Optional[np.random.Generator] = None,
    offset: Optional[tuple[int, int]] = None
) -> Tensor:
    """Stride-n convolution over a randomly shifted window.

    The input is reflection-padded by n-1 on the right and bottom, a window of
    the original size is cropped at offset (dy, dx) drawn uniformly from
    {0..n-1}^2, and the crop goes through the plain stride-n conv. The output
    shape does not depend on the offset.
    """
    if stride <= 1:
        raise ConfigError("swing_conv2d needs stride > 1; use conv2d for stride 1")
    if x.ndim != 4:
        raise ShapeError(f"swing_conv2d expects NCHW input, got {x.shape}")
    h, w = x.shape[2], x.shape[3]
    pad = stride - 1
    if h <= pad or w <= pad:
        raise ShapeError(f"Spatial dims {(h, w)} too small for stride {stride}")
    if offset is None:
        if rng is None:
            raise ConfigError("swing_conv2d needs an rng or a forced offset")
        dy, dx = (int(v) for v in rng.integers(0, stride, size=2))
    else:
        dy, dx = offset
        if not (0 <= dy < stride and 0 <= dx < stride):
            raise ConfigError(f"Offset {offset} outside [0, {stride})")
    if dy == 0 and dx == 0:
        window = x
    else:
        padded = ops.reflection_pad2d(x, (0, pad, 0, pad))
        window = ops.crop2d(padded, dy, dx, h, w)
    return ops.conv2d(window, weight, bias, stride, padding)


@dataclass
class SwingConfig:
    """Routes every strided conv through ``swing_conv2d`` with its own offset draw."""

    enabled: bool = True
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    offsets: list[tuple[int, int]] = field(default_factory=list)
    record_offsets: bool = False
    
    @classmethod
    def seeded(cls, seed: int | np.random.SeedSequence, enabled: bool = True) -> "SwingConfig":
        return cls(enabled=enabled, rng=np.random.default_rng(seed))
    
    def conv(self, x: Tensor, weight: Tensor, bias: Optional[Tensor], stride: int, padding: int) -> Tensor:
        if not self.enabled or stride <= 1:
            return ops.conv2d(x, weight, bias, stride, padding)
        dy, dx = (int(v) for v in self.rng.integers(0, stride, size=2))
        if self.record_offsets:
            self.offsets.append((dy, dx))
        return swing_conv2d(x, weight, bias, stride, padding, offset=(dy, dx))
