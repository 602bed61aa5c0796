import logging
from typing import Sequence

import numpy as np

from src.engine import Tensor, ops
from src.errors import ShapeError
from src.nn.models import TapRecord

logger = logging.getLogger(__name__)


def bns_loss(
    taps: TapRecord | Sequence[tuple[Tensor, Tensor]],
    running: Sequence[tuple[np.ndarray, np.ndarray]]
) -> Tensor:
    """Sum over BN layers of ||mu_s - mu||^2 + ||sigma_s - sigma||^2."""
    stats = taps.bn_stats if isinstance(taps, TapRecord) else list(taps)
    if len(stats) != len(running):
        raise ShapeError(f"{len(stats)} BN taps but {len(running)} running statistics")
    if not stats:
        raise ShapeError("bns_loss needs at least one BN layer")
    
    total = None
    for (mu_s, sigma_s), (mu, sigma) in zip(stats, running):
        if mu_s.shape != np.shape(mu) or sigma_s.shape != np.shape(sigma):
            raise ShapeError(f"Tap shape {mu_s.shape} does not match running stats {np.shape(mu)}")
        d_mu = ops.sub(mu_s, Tensor(mu, dtype=mu_s.dtype))
        d_sigma = ops.sub(sigma_s, Tensor(sigma, dtype=sigma_s.dtype))
        term = ops.add(ops.sum(ops.mul(d_mu, d_mu)), ops.sum(ops.mul(d_sigma, d_sigma)))
        total = term if total is None else ops.add(total, term)
    return total
