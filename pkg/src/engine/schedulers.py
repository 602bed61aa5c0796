import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

logger = logging.getLogger(__name__)


class ScheduleKind(Enum):
    CONSTANT = "constant"
    EXPONENTIAL = "exponential"
    COSINE = "cosine"
    REDUCE_ON_PLATEAU = "reduce_on_plateau"


@dataclass
class LrSchedule:
    """Learning-rate schedule; ``step()`` advances one step and returns the new lr.

    exponential:        lr0 * gamma ** floor(t / every_n)
    cosine:             lr0 * 0.5 * (1 + cos(pi * min(t, T) / T)), reaching 0 at T
    reduce_on_plateau:  lr *= factor once ``patience`` steps pass without a
                        relative improvement of ``threshold``; floored at min_lr
    """

    kind: ScheduleKind
    lr0: float
    gamma: float = 0.95
    every_n: int = 100
    total_steps: int = 1
    factor: float = 0.5
    patience: int = 50
    min_lr: float = 1e-4
    threshold: float = 1e-4
    t: int = 0
    lr: float = field(init=False)
    best: float = field(default=math.inf)
    bad_steps: int = 0

    def __post_init__(self):
        self.lr = self.lr0

    @classmethod
    def constant(cls, lr0: float) -> "LrSchedule":
        return cls(ScheduleKind.CONSTANT, lr0)

    @classmethod
    def exponential(cls, lr0: float, gamma: float = 0.95, every_n: int = 100) -> "LrSchedule":
        return cls(ScheduleKind.EXPONENTIAL, lr0, gamma=gamma, every_n=every_n)

    @classmethod
    def cosine(cls, lr0: float, total_steps: int) -> "LrSchedule":
        return cls(ScheduleKind.COSINE, lr0, total_steps=max(total_steps, 1))

    @classmethod
    def reduce_on_plateau(
        cls,
        lr0: float,
        factor: float = 0.5,
        patience: int = 50,
        min_lr: float = 1e-4
    ) -> "LrSchedule":
        return cls(ScheduleKind.REDUCE_ON_PLATEAU, lr0, factor=factor, patience=patience, min_lr=min_lr)

    def lr_at(self, t: int) -> float:
        if self.kind is ScheduleKind.EXPONENTIAL:
            return self.lr0 * self.gamma ** (t // self.every_n)
        if self.kind is ScheduleKind.COSINE:
            progress = min(t, self.total_steps) / self.total_steps
            return self.lr0 * 0.5 * (1.0 + math.cos(math.pi * progress))
        return self.lr

    def step(self, metric: Optional[float] = None) -> float:
        self.t += 1
        if self.kind is ScheduleKind.REDUCE_ON_PLATEAU:
            if metric is None:
                raise ValueError("reduce_on_plateau needs a metric")
            if math.isinf(self.best) or metric < self.best - self.threshold * abs(self.best):
                self.best = metric
                self.bad_steps = 0
            else:
                self.bad_steps += 1
                if self.bad_steps >= self.patience:
                    new_lr = max(self.lr * self.factor, self.min_lr)
                    if new_lr < self.lr:
                        logger.debug(f"Plateau after {self.t} steps, lr {self.lr:.3g} -> {new_lr:.3g}")
                    self.lr = new_lr
                    self.bad_steps = 0
            return self.lr
        self.lr = self.lr_at(self.t)
        return self.lr


def schedule_step(schedule: LrSchedule, metric: Optional[float] = None) -> float:
    return schedule.step(metric)
