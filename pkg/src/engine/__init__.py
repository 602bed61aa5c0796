"""Reverse-mode autodiff on numpy arrays, plus optimizers and lr schedules."""

from .tensor import Tensor, backward, no_grad, is_grad_enabled
from .optim import Adam, AdamState, adam_step
from .schedulers import LrSchedule, ScheduleKind, schedule_step
from . import ops

__all__ = [
    "Tensor", "backward", "no_grad", "is_grad_enabled",
    "Adam", "AdamState", "adam_step",
    "LrSchedule", "ScheduleKind", "schedule_step",
    "ops",
]
