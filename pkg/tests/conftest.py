"""Shared fixtures: small architectures that build and run in milliseconds."""

import pytest
from pathlib import Path
import sys

sys.path.insert(0, str(Path(__file__).parent.parent))

from src.config import reset_settings
from src.nn.models import ArchConfig, build_model


TINY_ARCH = {
    "name": "tiny",
    "input_size": 8,
    "in_channels": 3,
    "num_classes": 10,
    "seed": 0,
    "layers": [
        {"kind": "conv", "out_channels": 4},
        {"kind": "bn"},
        {"kind": "relu"},
        {"kind": "conv", "out_channels": 8, "stride": 2},
        {"kind": "bn"},
        {"kind": "relu"},
        {"kind": "global_avg_pool"},
        {"kind": "flatten"},
        {"kind": "linear", "out_channels": 10},
    ],
}

TINY_RESIDUAL_ARCH = {
    "name": "tiny_residual",
    "input_size": 8,
    "in_channels": 3,
    "num_classes": 10,
    "seed": 0,
    "layers": [
        {"kind": "conv", "out_channels": 4},
        {"kind": "bn"},
        {"kind": "relu"},
        {
            "kind": "residual_block",
            "body": [
                {"kind": "conv", "out_channels": 8, "stride": 2},
                {"kind": "bn"},
                {"kind": "relu"},
                {"kind": "conv", "out_channels": 8},
                {"kind": "bn"},
            ],
            "shortcut": [
                {"kind": "conv", "out_channels": 8, "kernel": 1, "stride": 2, "padding": 0},
                {"kind": "bn"},
            ],
        },
        {"kind": "global_avg_pool"},
        {"kind": "flatten"},
        {"kind": "linear", "out_channels": 10},
    ],
}


@pytest.fixture(autouse=True)
def quiet_settings(monkeypatch):
    """No progress bars in tests; settings are re-read per test."""
    monkeypatch.setenv("GENIE_SHOW_PROGRESS", "false")
    reset_settings()
    yield
    reset_settings()


@pytest.fixture
def tiny_arch():
    return ArchConfig.model_validate(TINY_ARCH)


@pytest.fixture
def tiny_model(tiny_arch):
    return build_model(tiny_arch)


@pytest.fixture
def tiny_residual_model():
    return build_model(ArchConfig.model_validate(TINY_RESIDUAL_ARCH))
