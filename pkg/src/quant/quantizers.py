import logging
import math
from typing import Optional

import numpy as np

from src.engine import Tensor, ops
from src.errors import NumericError, ShapeError

from .primitives import (
    act_bounds,
    init_act_step,
    init_step_pnorm,
    inverse_rectified_sigmoid,
    rectified_sigmoid,
    rectified_sigmoid_np,
    weight_bounds,
)

logger = logging.getLogger(__name__)


def _per_channel(t: Tensor, ndim: int) -> Tensor:
    return ops.reshape(t, (t.shape[0],) + (1,) * (ndim - 1))


def soft_quant_weights(
    w: Tensor,
    s_w: Tensor,
    z: np.ndarray,
    v: Tensor,
    n: int,
    p: int
) -> Tensor:
    """s_w * (clip(floor(W / s_w) + h(V) + z, n, p) - z), differentiable in s_w and V.

    floor uses the straight-through estimator, so gradients reach s_w both
    through the division and the outer scale.
    """
    if v.shape != w.shape:
        raise ShapeError(f"Soft bits {v.shape} do not match weight {w.shape}")
    if s_w.shape != (w.shape[0],) or np.shape(z) != (w.shape[0],):
        raise ShapeError(f"Per-channel step {s_w.shape} / zero point {np.shape(z)} vs {w.shape[0]} channels")
    s4 = _per_channel(s_w, w.ndim)
    z4 = Tensor(np.asarray(z).reshape(s4.shape), dtype=w.dtype)
    soft = ops.add(ops.add(ops.floor_ste(ops.div(w, s4)), rectified_sigmoid(v)), z4)
    return ops.mul(ops.sub(ops.clamp(soft, n, p), z4), s4)


def lsq_act_quant(
    x: Tensor,
    s_a: Tensor,
    bits: int,
    qdrop_prob: float = 0.0,
    rng: Optional[np.random.Generator] = None
) -> Tensor:
    """Symmetric per-tensor LSQ fake quantization with optional QDrop.

    x_q = s * round(clamp(x / s, n, p)), which equals s * clamp(round(x / s), n, p)
    for integer bounds. Clamping first puts the range test on the raw ratio
    x / s: outside [n, p] the input gradient is 0 and the step gradient is n or
    p, also for ratios in (p, p + 0.5) that would round back onto p. The step
    gradient is scaled by 1 / sqrt(numel * p). With QDrop each element keeps
    its full-precision value with probability ``qdrop_prob``.
    """
    if np.any(s_a.data <= 0):
        raise NumericError(f"Activation step must be positive, got {s_a.data}")
    n, p = act_bounds(bits)
    s_g = ops.grad_scale(s_a, 1.0 / math.sqrt(x.size * p))
    x_q = ops.mul(ops.round_ste(ops.clamp(ops.div(x, s_g), n, p)), s_g)
    if qdrop_prob <= 0:
        return x_q
    if rng is None:
        raise ValueError("QDrop needs an rng")
    keep_fp = rng.random(x.shape) < qdrop_prob
    return ops.where(keep_fp, x, x_q)


class WeightQuantizer:
    """Per-output-channel asymmetric weight quantizer with learnable soft rounding."""

    def __init__(
        self,
        weight: Tensor,
        bits: int,
        p_ord: float = 2.0,
        learn_step: bool = True
    ):
        self.weight = weight
        self.bits = bits
        self.n, self.p = weight_bounds(bits)
        s, z, flagged = init_step_pnorm(weight.data, bits, p_ord)
        self.s_w = Tensor(s.astype(weight.dtype), requires_grad=learn_step)
        self.z = z
        self.flagged = flagged
        s4 = s.reshape((-1,) + (1,) * (weight.ndim - 1)).astype(weight.dtype)
        scaled = weight.data / s4
        rest = np.clip(scaled - np.floor(scaled), 1e-4, 1 - 1e-4)
        self.v: Optional[Tensor] = Tensor(inverse_rectified_sigmoid(rest).astype(weight.dtype), requires_grad=True)
        self.w_int: Optional[np.ndarray] = None

    @classmethod
    def from_hardened(
        cls,
        weight: Tensor,
        bits: int,
        s_w: np.ndarray,
        z: np.ndarray,
        w_int: np.ndarray
    ) -> "WeightQuantizer":
        """Rebuild a finalized quantizer; soft bits are not kept once hardened."""
        wq = cls.__new__(cls)
        wq.weight = weight
        wq.bits = bits
        wq.n, wq.p = weight_bounds(bits)
        wq.s_w = Tensor(np.asarray(s_w, dtype=weight.dtype))
        wq.z = np.asarray(z, dtype=np.int64)
        wq.flagged = np.zeros(wq.z.shape, dtype=bool)
        wq.v = None
        wq.w_int = np.asarray(w_int, dtype=np.int64)
        if wq.w_int.shape != weight.shape:
            raise ShapeError(f"Integer weights {wq.w_int.shape} do not match {weight.shape}")
        return wq
        
    @property
    def hardened(self) -> bool:
        return self.w_int is not None
    
    def parameters(self) -> list[Tensor]:
        return [t for t in (self.s_w, self.v) if t is not None and t.requires_grad]
    
    def h(self) -> np.ndarray:
        if self.v is None:
            raise ValueError("Soft bits were dropped when this quantizer was hardened")
        return rectified_sigmoid_np(self.v.data)
    
    def binarized_fraction(self, tol: float = 0.01) -> float:
        if self.v is None:
            return 1.0
        h = self.h()
        return float(np.mean(np.minimum(h, 1.0 - h) <= tol))
    
    def forward(self, hard: bool = False) -> Tensor:
        """Soft-rounded weights, or rounding fixed at h(V) >= 0.5 when ``hard``."""
        if self.w_int is not None:
            return Tensor(self.dequantize(), dtype=self.weight.dtype)
        if hard:
            return Tensor(self.dequantize(self.hard_int()), dtype=self.weight.dtype)
        return soft_quant_weights(self.weight, self.s_w, self.z, self.v, self.n, self.p)
    
    def hard_int(self) -> np.ndarray:
        s4 = self.s_w.data.reshape((-1,) + (1,) * (self.weight.ndim - 1))
        up = (self.h() >= 0.5).astype(np.int64)
        z4 = self.z.reshape(s4.shape)
        return np.clip(np.floor(self.weight.data / s4).astype(np.int64) + up + z4, self.n, self.p)
    
    def harden(self) -> np.ndarray:
        """Fix rounding at h(V) >= 0.5 and store the integer weights."""
        if self.v is not None:
            self.w_int = self.hard_int()
        return self.w_int
    
    def dequantize(self, w_int: Optional[np.ndarray] = None) -> np.ndarray:
        """s_w * (w_int - z), for the stored integer weights unless ``w_int`` is given."""
        w_int = self.w_int if w_int is None else w_int
        if w_int is None:
            raise ValueError("Weights are not hardened yet")
        s4 = self.s_w.data.reshape((-1,) + (1,) * (self.weight.ndim - 1))
        z4 = self.z.reshape(s4.shape)
        return (w_int - z4).astype(s4.dtype) * s4
    
    def clamp_step(self, floor: float = 1e-8) -> None:
        self.s_w.data = np.maximum(self.s_w.data, floor).astype(self.s_w.dtype)


class ActQuantizer:
    """Per-tensor symmetric LSQ activation quantizer, initialized from its first batch."""

    def __init__(self, bits: int, learn_step: bool = True):
        self.bits = bits
        self.n, self.p = act_bounds(bits)
        self.s_a: Optional[Tensor] = None
        self.learn_step = learn_step
        self.flagged = False
        self.qdrop_prob = 0.0
        self.rng: Optional[np.random.Generator] = None
        
    @property
    def initialized(self) -> bool:
        return self.s_a is not None
    
    def initialize(self, x: np.ndarray) -> None:
        s, flagged = init_act_step(x, self.bits)
        self.s_a = Tensor(np.asarray(s, dtype=np.float32), requires_grad=self.learn_step)
        self.flagged = flagged
        
    def parameters(self) -> list[Tensor]:
        return [self.s_a] if self.s_a is not None and self.s_a.requires_grad else []
    
    def forward(self, x: Tensor) -> Tensor:
        if self.s_a is None:
            self.initialize(x.data)
        s_a = ops.astype(self.s_a, x.dtype)
        return lsq_act_quant(x, s_a, self.bits, self.qdrop_prob, self.rng)
    
    def clamp_step(self, floor: float = 1e-8) -> None:
        if self.s_a is not None:
            self.s_a.data = np.maximum(self.s_a.data, floor).astype(self.s_a.dtype)
