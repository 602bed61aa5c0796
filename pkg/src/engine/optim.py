import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from src.engine.tensor import Tensor
from src.errors import ShapeError

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[Optional[np.ndarray]],
    state: AdamState
) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place.

    A missing gradient counts as zero.
    """
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} params but {len(grads)} grads")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    elif len(state.m) != len(params):
        raise ShapeError(f"Adam state tracks {len(state.m)} params, got {len(params)}")

    state.step_count += 1
    t = state.step_count
    bias1 = 1.0 - state.beta1 ** t
    bias2 = 1.0 - state.beta2 ** t

    for idx, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape or state.m[idx].shape != p.shape:
            raise ShapeError(f"Gradient {g.shape} / moment {state.m[idx].shape} vs param {p.shape}")
        m = state.beta1 * state.m[idx] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[idx] + (1.0 - state.beta2) * g * g
        state.m[idx] = m.astype(p.dtype, copy=False)
        state.v[idx] = v.astype(p.dtype, copy=False)
        m_hat = m / bias1
        v_hat = v / bias2
        update = state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        p.data = (p.data - update).astype(p.dtype, copy=False)

    return state


class Adam:
    
    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8
    ):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
        
    @property
    def lr(self) -> float:
        return self.state.lr
    
    @lr.setter
    def lr(self, value: float) -> None:
        self.state.lr = value
        
    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state)
        
    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
