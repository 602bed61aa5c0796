import logging
from contextlib import contextmanager
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Iterator, Optional

import numpy as np

from src.engine import Tensor
from src.errors import CheckpointError, ConfigError
from src.nn.checkpoint import load_checkpoint, save_checkpoint
from src.nn.layers import Conv2d, ForwardContext, Linear, Module, ResidualBlock, run_layers
from src.nn.models import ArchConfig, ModelGraph, build_model

from .quantizers import ActQuantizer, WeightQuantizer

logger = logging.getLogger(__name__)


class QuantPolicy(str, Enum):
    QDROP = "qdrop"
    BRECQ = "brecq"
    ALL = "all"


class QuantVariant(str, Enum):
    GENIE = "genie"
    FROZEN = "frozen"


@dataclass
class QuantParams:
    """Quantization state of one conv/linear layer."""

    name: str
    bits_w: int
    bits_a: Optional[int]
    weight: WeightQuantizer
    act: Optional[ActQuantizer] = None
    
    @property
    def s_w(self) -> Tensor:
        return self.weight.s_w
    
    @property
    def z(self) -> np.ndarray:
        return self.weight.z
    
    @property
    def v(self) -> Tensor:
        return self.weight.v
    
    @property
    def s_a(self) -> Optional[Tensor]:
        return self.act.s_a if self.act is not None else None
    
    def parameters(self) -> list[Tensor]:
        params = self.weight.parameters()
        if self.act is not None:
            params += self.act.parameters()
        return params


def _first_quantizable(layers: list[Module]) -> list[Module]:
    """Conv/linear layers that read the input of ``layers`` directly."""
    for layer in layers:
        if isinstance(layer, ResidualBlock):
            found = _first_quantizable(layer.body)
            if layer.shortcut:
                found += _first_quantizable(layer.shortcut)
            return found
        if isinstance(layer, (Conv2d, Linear)):
            return [layer]
    return []


def block_input_consumers(model: ModelGraph, block_idx: int) -> list[str]:
    start, end = model.block_boundaries[block_idx]
    return [layer.name for layer in _first_quantizable(model.layers[start:end])]


def resolve_policy(policy: Optional[QuantPolicy | str], first_last_8bit: bool) -> QuantPolicy:
    if policy is not None:
        return QuantPolicy(policy)
    return QuantPolicy.QDROP if first_last_8bit else QuantPolicy.ALL


def assign_bits(
    model: ModelGraph,
    bits_w: int,
    bits_a: int,
    policy: QuantPolicy
) -> dict[str, tuple[int, Optional[int]]]:
    """Per-layer (weight bits, input-activation bits); the network input is never quantized."""
    layers = model.quantizable_layers()
    if not layers:
        raise ConfigError("Model has no conv/linear layers to quantize")
    first, last = layers[0].name, layers[-1].name
    after_first = set(block_input_consumers(model, 1)) if len(model.block_boundaries) > 1 else set()
    
    plan: dict[str, tuple[int, Optional[int]]] = {}
    for layer in layers:
        w_bits, a_bits = bits_w, bits_a
        if policy is not QuantPolicy.ALL:
            if layer.name in (first, last):
                w_bits = 8
            if layer.name == last:
                a_bits = 8
            if policy is QuantPolicy.BRECQ and layer.name in after_first:
                a_bits = 8
        if layer.name == first:
            a_bits = None
        plan[layer.name] = (w_bits, a_bits)
    return plan


class QuantizedModel:
    """A ModelGraph whose conv/linear layers see quantized weights and inputs.

    The full-precision model is shared, not copied: quantization happens in
    ``transform`` which every conv/linear layer calls through its context.
    """

    def __init__(
        self,
        model: ModelGraph,
        params: dict[str, QuantParams],
        policy: QuantPolicy = QuantPolicy.QDROP,
        variant: QuantVariant = QuantVariant.GENIE,
        bits_w: int = 4,
        bits_a: int = 4
    ):
        self.model = model
        self.params = params
        self.policy = policy
        self.variant = variant
        self.bits_w = bits_w
        self.bits_a = bits_a
        self.finalized = False
        self.hard = False
        
    @classmethod
    def build(
        cls,
        model: ModelGraph,
        bits_w: int,
        bits_a: int,
        policy: QuantPolicy = QuantPolicy.QDROP,
        variant: QuantVariant = QuantVariant.GENIE,
        p_ord: float = 2.0
    ) -> "QuantizedModel":
        model.eval().set_trainable(False)
        plan = assign_bits(model, bits_w, bits_a, policy)
        learn_w = variant is QuantVariant.GENIE
        params = {}
        for layer in model.quantizable_layers():
            w_bits, a_bits = plan[layer.name]
            params[layer.name] = QuantParams(
                name=layer.name,
                bits_w=w_bits,
                bits_a=a_bits,
                weight=WeightQuantizer(layer.weight, w_bits, p_ord, learn_step=learn_w),
                act=ActQuantizer(a_bits) if a_bits is not None else None,
            )
        flagged = sum(int(qp.weight.flagged.sum()) for qp in params.values())
        logger.info(
            f"Quantizing {len(params)} layers at W{bits_w}A{bits_a} "
            f"(policy={policy.value}, variant={variant.value}, p_ord={p_ord}, {flagged} degenerate channels)"
        )
        return cls(model, params, policy, variant, bits_w, bits_a)
    
    @property
    def arch(self) -> ArchConfig:
        return self.model.arch
    
    @property
    def block_boundaries(self) -> list[tuple[int, int]]:
        return self.model.block_boundaries
    
    def transform(self, layer: Module, x: Tensor, weight: Tensor) -> tuple[Tensor, Tensor]:
        qp = self.params.get(layer.name)
        if qp is None:
            return x, weight
        if qp.act is not None:
            x = qp.act.forward(x)
        return x, qp.weight.forward(hard=self.hard)
    
    @contextmanager
    def hard_rounding(self) -> Iterator["QuantizedModel"]:
        """Evaluate with rounding fixed at h(V) >= 0.5 without hardening the soft bits."""
        prev, self.hard = self.hard, True
        try:
            yield self
        finally:
            self.hard = prev
    
    def _ctx(self) -> ForwardContext:
        return ForwardContext(quant=self)
    
    def forward(self, x: Tensor, ctx: Optional[ForwardContext] = None) -> Tensor:
        ctx = ctx or ForwardContext()
        ctx.quant = self
        return run_layers(self.model.layers, x, ctx)
    
    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)
    
    def forward_block(self, block_idx: int, x: Tensor) -> Tensor:
        start, end = self.model.block_boundaries[block_idx]
        return run_layers(self.model.layers[start:end], x, self._ctx())
    
    def block_params(self, block_idx: int) -> list[QuantParams]:
        return [qp for name, qp in self.params.items() if self.model.block_of(name) == block_idx]
    
    def set_qdrop(self, block_idx: Optional[int], prob: float, rng: Optional[np.random.Generator]) -> None:
        """Enable QDrop on the quantizers reading block ``block_idx``'s input; None disables it everywhere."""
        consumers = set(block_input_consumers(self.model, block_idx)) if block_idx is not None else set()
        for name, qp in self.params.items():
            if qp.act is None:
                continue
            active = name in consumers
            qp.act.qdrop_prob = prob if active else 0.0
            qp.act.rng = rng if active else None
            
    def binarized_fraction(self, tol: float = 0.01) -> float:
        counts = [(qp.weight.binarized_fraction(tol), qp.weight.weight.size) for qp in self.params.values()]
        total = sum(size for _, size in counts)
        return float(sum(frac * size for frac, size in counts) / total) if total else 1.0
    
    def finalize(self) -> "QuantizedModel":
        """Harden soft bits at h(V) >= 0.5 into integer weights and disable QDrop."""
        self.set_qdrop(None, 0.0, None)
        for qp in self.params.values():
            qp.weight.harden()
        self.finalized = True
        logger.info(f"Finalized {len(self.params)} layers; h(V) binarization {self.binarized_fraction():.4f}")
        return self
    
    def describe(self) -> dict[str, Any]:
        return {
            name: {"bits_w": qp.bits_w, "bits_a": qp.bits_a, "block": self.model.block_of(name)}
            for name, qp in self.params.items()
        }


def finalize(qm: QuantizedModel) -> QuantizedModel:
    return qm.finalize()


def save_quantized(qm: QuantizedModel, path: Path | str, extra_metadata: Optional[dict[str, Any]] = None) -> Path:
    """Persist a finalized model: integer weights, per-channel s_w and z, per-layer s_a and the FP remainder."""
    if not qm.finalized:
        raise ConfigError("Only finalized quantized models can be saved")
    tensors: dict[str, np.ndarray] = {}
    for key, value in qm.model.state_dict().items():
        tensors[f"fp.{key}"] = value
    for name, qp in qm.params.items():
        tensors[f"q.{name}.w_int"] = qp.weight.w_int.astype(np.int32)
        tensors[f"q.{name}.s_w"] = qp.s_w.data
        tensors[f"q.{name}.z"] = qp.z.astype(np.int32)
        if qp.act is not None and qp.act.s_a is not None:
            tensors[f"q.{name}.s_a"] = qp.act.s_a.data.reshape(1)
    metadata = {
        "kind": "quantized",
        "arch": qm.arch.model_dump(),
        "policy": qm.policy.value,
        "variant": qm.variant.value,
        "bits_w": qm.bits_w,
        "bits_a": qm.bits_a,
        "layers": qm.describe(),
    }
    metadata.update(extra_metadata or {})
    return save_checkpoint(tensors, path, metadata)


def load_quantized(path: Path | str) -> QuantizedModel:
    ckpt = load_checkpoint(path)
    meta = ckpt.metadata
    if meta.get("kind") != "quantized":
        raise CheckpointError(f"{path} does not hold a quantized model")
    model = build_model(ArchConfig.model_validate(meta["arch"]))
    model.load_state_dict({k[3:]: v for k, v in ckpt.tensors.items() if k.startswith("fp.")})
    model.eval().set_trainable(False)
    
    modules = {m.name: m for m in model.quantizable_layers()}
    params = {}
    for name, info in meta["layers"].items():
        wq = WeightQuantizer.from_hardened(
            modules[name].weight,
            info["bits_w"],
            ckpt.tensors[f"q.{name}.s_w"],
            ckpt.tensors[f"q.{name}.z"],
            ckpt.tensors[f"q.{name}.w_int"],
        )
        act = None
        if info["bits_a"] is not None:
            act = ActQuantizer(info["bits_a"], learn_step=False)
            act.s_a = Tensor(ckpt.tensors[f"q.{name}.s_a"].reshape(()))
        params[name] = QuantParams(name, info["bits_w"], info["bits_a"], wq, act)
        
    qm = QuantizedModel(
        model, params, QuantPolicy(meta["policy"]), QuantVariant(meta["variant"]),
        meta["bits_w"], meta["bits_a"]
    )
    qm.finalized = True
    return qm
