import json
from pathlib import Path
from typing import Any, Optional

from pydantic import BaseModel, Field

SCHEMA_PATH = Path(__file__).resolve().parents[2] / "schemas" / "report.schema.json"


class BlockMSE(BaseModel):
    block: int
    mse_before: float
    mse_after: float
    binarized: float


class AblationRow(BaseModel):
    label: str
    data_mode: str
    swing: bool
    variant: str
    num_images: int
    p_ord: float
    seed: int
    accuracy: float = Field(ge=0, le=100)


class Report(BaseModel):
    command: str
    config: dict[str, Any]
    seed: int
    fp32_accuracy: Optional[float] = Field(default=None, ge=0, le=100)
    quant_accuracy_soft: Optional[float] = Field(default=None, ge=0, le=100)
    quant_accuracy_hard: Optional[float] = Field(default=None, ge=0, le=100)
    block_mse: list[BlockMSE] = Field(default_factory=list)
    bns_loss_initial: list[float] = Field(default_factory=list)
    bns_loss_final: list[float] = Field(default_factory=list)
    hV_binarization: Optional[float] = Field(default=None, ge=0, le=1)
    wall_clock: dict[str, float] = Field(default_factory=dict)
    artifacts: dict[str, str] = Field(default_factory=dict)
    ablation: list[AblationRow] = Field(default_factory=list)
    statistics: dict[str, float] = Field(default_factory=dict)


def report_schema() -> dict[str, Any]:
    return json.loads(SCHEMA_PATH.read_text(encoding="utf-8"))
