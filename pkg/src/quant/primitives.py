"""Uniform quantization building blocks.

Weights are quantized per output channel with asymmetric integer range
[0, 2^b - 1] and a zero point; activations per tensor with the symmetric
range [-2^(b-1), 2^(b-1) - 1]. Rounding is half away from zero.
"""
import logging
from typing import Optional

import numpy as np

from src.engine import Tensor, ops
from src.engine.ops import round_half_away
from src.errors import ConfigError, NumericError

logger = logging.getLogger(__name__)

ZETA = 1.1
GAMMA = -0.1
TINY_STEP = 1e-8
GRID_SIZE = 100


def weight_bounds(bits: int) -> tuple[int, int]:
    _check_bits(bits)
    return 0, 2 ** bits - 1


def act_bounds(bits: int) -> tuple[int, int]:
    _check_bits(bits)
    return -(2 ** (bits - 1)), 2 ** (bits - 1) - 1


def _check_bits(bits: int) -> None:
    if not 2 <= bits <= 16:
        raise ConfigError(f"Bit width must be in [2, 16], got {bits}")


def _channel_view(v: np.ndarray, ndim: int) -> np.ndarray:
    v = np.asarray(v)
    return v.reshape(v.shape + (1,) * (ndim - v.ndim)) if v.ndim else v


def minmax_step(w: np.ndarray, bits: int, per_channel: bool = False) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Min-Max step size s = (max - min) / (2^b - 1) and zero point z = -round(min / s).

    Returns (s, z, flagged). A constant tensor (or channel) falls back to
    s = max|w| * 2^(1-b) with z at the middle of the range and is flagged.
    """
    w = np.asarray(w)
    n, p = weight_bounds(bits)
    axes = tuple(range(1, w.ndim)) if per_channel else None
    w_min = w.min(axis=axes)
    w_max = w.max(axis=axes)
    span = (w_max - w_min).astype(np.float64)
    flagged = np.asarray(span <= 0)
    
    safe_span = np.where(flagged, 1.0, span)
    s = safe_span / p
    fallback = np.abs(np.maximum(np.abs(w_min), np.abs(w_max))).astype(np.float64) * 2.0 ** (1 - bits)
    fallback = np.where(fallback > 0, fallback, TINY_STEP)
    s = np.where(flagged, fallback, s)
    z = np.where(flagged, (n + p + 1) // 2, -round_half_away(w_min / s))
    z = np.clip(z, n, p).astype(np.int64)
    if np.any(flagged):
        logger.warning(f"Min-Max on a constant tensor/channel ({int(flagged.sum())} flagged); using fallback step")
    return s.astype(np.float32), z, flagged


def quantize_uniform(
    w: np.ndarray,
    s: np.ndarray | float,
    z: np.ndarray | int,
    n: int,
    p: int
) -> tuple[np.ndarray, np.ndarray]:
    """w_int = clip(round(w / s) + z, n, p); w_q = s * (w_int - z).

    ``s`` and ``z`` are scalars or per-channel vectors along axis 0.
    """
    w = np.asarray(w)
    if not np.all(np.isfinite(w)):
        raise NumericError("quantize_uniform got non-finite values")
    s = _channel_view(np.asarray(s, dtype=w.dtype if w.dtype.kind == "f" else np.float32), w.ndim)
    z = _channel_view(np.asarray(z, dtype=np.int64), w.ndim)
    if np.any(s <= 0):
        raise NumericError("quantize_uniform needs s > 0")
    w_int = np.clip(round_half_away(w / s) + z, n, p).astype(np.int64)
    w_q = s * (w_int - z).astype(s.dtype)
    return w_int, w_q


def pnorm_error(w: np.ndarray, s: np.ndarray, z: np.ndarray, n: int, p: int, p_ord: float) -> np.ndarray:
    """Per-channel sum |w - w_q|^p_ord, for ``w`` shaped (C, ...) and s, z shaped (C,)."""
    w64 = np.asarray(w, dtype=np.float64)
    s4 = _channel_view(np.asarray(s, dtype=np.float64), w64.ndim)
    z4 = _channel_view(np.asarray(z, dtype=np.float64), w64.ndim)
    w_q = s4 * (np.clip(round_half_away(w64 / s4) + z4, n, p) - z4)
    return (np.abs(w64 - w_q) ** p_ord).reshape(w64.shape[0], -1).sum(axis=1)


def init_step_pnorm(
    w: np.ndarray,
    bits: int,
    p_ord: float = 2.0,
    grid: int = GRID_SIZE
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-channel step size minimizing the p_ord-norm weight reconstruction error.

    Candidates are s_max * k / grid for k = 1..grid with s_max the Min-Max
    step; the zero point follows each candidate. Ties go to the smaller step.
    Returns (s, z, flagged) where flagged marks all-zero channels, which get a
    tiny positive step.
    """
    w = np.asarray(w)
    if p_ord <= 0:
        raise ConfigError(f"p_ord must be positive, got {p_ord}")
    n, p = weight_bounds(bits)
    s_max, _, _ = minmax_step(w, bits, per_channel=True)
    w_min = w.reshape(w.shape[0], -1).min(axis=1).astype(np.float64)
    channels = w.shape[0]
    zero_channel = np.abs(w.reshape(channels, -1)).max(axis=1) == 0
    
    best_s = np.asarray(s_max, dtype=np.float64).copy()
    best_err = np.full(channels, np.inf)
    for k in range(1, grid + 1):
        s = s_max.astype(np.float64) * k / grid
        z = np.clip(-round_half_away(w_min / s), n, p)
        err = pnorm_error(w, s, z, n, p, p_ord)
        better = err < best_err
        best_err = np.where(better, err, best_err)
        best_s = np.where(better, s, best_s)
        
    best_s = np.where(zero_channel, TINY_STEP, best_s)
    best_z = np.clip(-round_half_away(w_min / best_s), n, p)
    best_z = np.where(zero_channel, 0, best_z).astype(np.int64)
    if np.any(zero_channel):
        logger.warning(f"{int(zero_channel.sum())} all-zero weight channels; step set to {TINY_STEP}")
    return best_s.astype(np.float32), best_z, zero_channel


def rectified_sigmoid(v: Tensor) -> Tensor:
    """h(V) = clamp(sigmoid(V) * (zeta - gamma) + gamma, 0, 1)."""
    return ops.clamp(ops.add(ops.mul(ops.sigmoid(v), ZETA - GAMMA), GAMMA), 0.0, 1.0)


def rectified_sigmoid_np(v: np.ndarray) -> np.ndarray:
    return np.clip(ops._sigmoid(np.asarray(v)) * (ZETA - GAMMA) + GAMMA, 0.0, 1.0)


def inverse_rectified_sigmoid(h: np.ndarray) -> np.ndarray:
    """V such that h(V) = h, for h strictly inside (0, 1)."""
    h = np.asarray(h)
    return -np.log((ZETA - GAMMA) / (h - GAMMA) - 1.0)


def rounding_reg(v: Tensor, beta: float) -> Tensor:
    """sum(1 - |2 h(V) - 1|^beta): 0 when every h is 0 or 1, numel(V) when all are 0.5."""
    if beta <= 0:
        raise ConfigError(f"beta must be positive, got {beta}")
    h = rectified_sigmoid(v)
    centered = ops.abs(ops.sub(ops.mul(h, 2.0), 1.0))
    return ops.sum(ops.sub(1.0, ops.pow(centered, beta)))


def beta_at(step: int, total: int, beta_start: float = 20.0, beta_end: float = 2.0, warmup_frac: float = 0.2) -> tuple[float, bool]:
    """Annealed exponent for ``rounding_reg`` and whether the regularizer is active.

    The regularizer is off for the first ``warmup_frac`` of the steps; after
    that beta falls linearly from beta_start to beta_end at the last step.
    """
    if not 0 <= step < total:
        raise ValueError(f"step {step} outside [0, {total})")
    warmup = int(warmup_frac * total)
    if step < warmup:
        return beta_start, False
    span = total - 1 - warmup
    progress = (step - warmup) / span if span > 0 else 1.0
    return beta_start - (beta_start - beta_end) * progress, True


def init_act_step(x: np.ndarray, bits: int, grid: int = GRID_SIZE) -> tuple[float, bool]:
    """Symmetric per-tensor step minimizing the quantization MSE of ``x``.

    Candidates are s_mm * k / grid with s_mm = max|x| / (2^(b-1) - 1).
    All-zero input returns a tiny step, flagged.
    """
    x = np.asarray(x, dtype=np.float64)
    n, p = act_bounds(bits)
    peak = float(np.abs(x).max()) if x.size else 0.0
    if peak == 0.0:
        logger.warning("All-zero activations; activation step set to a tiny constant")
        return TINY_STEP, True
    s_mm = peak / p
    best_s, best_err = s_mm, np.inf
    for k in range(1, grid + 1):
        s = s_mm * k / grid
        err = float(np.mean((x - s * np.clip(round_half_away(x / s), n, p)) ** 2))
        if err < best_err:
            best_s, best_err = s, err
    return best_s, False


def act_mse(x: np.ndarray, s: float, bits: int) -> float:
    n, p = act_bounds(bits)
    x = np.asarray(x, dtype=np.float64)
    return float(np.mean((x - s * np.clip(round_half_away(x / s), n, p)) ** 2))
