from .commands import cmd_ablate, cmd_distill, cmd_eval, cmd_pretrain, cmd_quantize
from .config import RunConfig, load_run_config
from .report import Report

__all__ = [
    "Report",
    "RunConfig",
    "cmd_ablate",
    "cmd_distill",
    "cmd_eval",
    "cmd_pretrain",
    "cmd_quantize",
    "load_run_config",
]
