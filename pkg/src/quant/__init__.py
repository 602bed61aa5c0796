"""Block-wise post-training quantization with jointly learned steps and soft rounding."""

from .primitives import (
    act_bounds,
    beta_at,
    init_act_step,
    init_step_pnorm,
    inverse_rectified_sigmoid,
    minmax_step,
    quantize_uniform,
    rectified_sigmoid,
    rounding_reg,
    weight_bounds,
)
from .qmodel import (
    QuantizedModel,
    QuantParams,
    QuantPolicy,
    QuantVariant,
    finalize,
    load_quantized,
    save_quantized,
)
from .quantizers import ActQuantizer, WeightQuantizer, lsq_act_quant, soft_quant_weights
from .reconstruct import BlockReport, ReconConfig, quantize_model, reconstruct_block

__all__ = [
    "ActQuantizer",
    "BlockReport",
    "QuantizedModel",
    "QuantParams",
    "QuantPolicy",
    "QuantVariant",
    "ReconConfig",
    "WeightQuantizer",
    "act_bounds",
    "beta_at",
    "finalize",
    "init_act_step",
    "init_step_pnorm",
    "inverse_rectified_sigmoid",
    "load_quantized",
    "lsq_act_quant",
    "minmax_step",
    "quantize_model",
    "quantize_uniform",
    "reconstruct_block",
    "rectified_sigmoid",
    "rounding_reg",
    "save_quantized",
    "soft_quant_weights",
    "weight_bounds",
]
