import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Literal, Optional

import numpy as np
from pydantic import BaseModel, Field, ValidationError

from src.config import get_settings
from src.engine.tensor import Tensor
from src.errors import ConfigError
from src.engine.ops import conv_output_size

from .layers import (
    AvgPool2d,
    BatchNorm2d,
    Conv2d,
    Flatten,
    ForwardContext,
    GlobalAvgPool,
    LeakyReLU,
    Linear,
    Module,
    ReLU,
    ResidualBlock,
    SwingHook,
    Upsample,
    run_layers,
)

logger = logging.getLogger(__name__)

LayerKind = Literal[
    "conv", "bn", "relu", "leaky_relu", "linear", "avg_pool",
    "global_avg_pool", "flatten", "upsample", "residual_block"
]

ACTIVATION_KINDS = {"relu", "leaky_relu"}


class LayerSpec(BaseModel):
    
    kind: LayerKind
    out_channels: Optional[int] = Field(default=None, ge=1, description="conv output channels / linear output features")
    kernel: int = Field(default=3, ge=1)
    stride: int = Field(default=1, ge=1)
    padding: Optional[int] = Field(default=None, ge=0, description="defaults to kernel // 2")
    bias: bool = False
    slope: float = 0.2
    body: list["LayerSpec"] = Field(default_factory=list)
    shortcut: list["LayerSpec"] = Field(default_factory=list)


class ArchConfig(BaseModel):
    
    name: str
    input_size: int = Field(default=32, ge=4)
    in_channels: int = Field(default=3, ge=1)
    num_classes: int = Field(default=10, ge=2)
    seed: int = 0
    bn_momentum: float = Field(default=0.1, gt=0, le=1)
    layers: list[LayerSpec]


def load_arch(name_or_path: str | Path) -> ArchConfig:
    """Load an arch JSON file, or a shipped arch by name (e.g. ``resnet_tiny``)."""
    path = Path(name_or_path)
    if not path.suffix:
        path = get_settings().archs_dir / f"{name_or_path}.json"
    if not path.exists():
        raise ConfigError(f"Unknown architecture: {name_or_path}")
    try:
        return ArchConfig.model_validate_json(path.read_text(encoding="utf-8"))
    except ValidationError as e:
        raise ConfigError(f"Invalid arch config {path}: {e}") from e


@dataclass
class TapRequest:
    bn_stats: bool = False
    block_outputs: bool = False
    swing: Optional[SwingHook] = None


@dataclass
class TapRecord:
    bn_stats: list[tuple[Tensor, Tensor]] = field(default_factory=list)
    block_outputs: list[Tensor] = field(default_factory=list)


@dataclass
class ModelGraph:
    arch: ArchConfig
    layers: list[Module]
    block_boundaries: list[tuple[int, int]]
    training: bool = False
    
    def modules(self) -> Iterator[Module]:
        for layer in self.layers:
            yield from layer.modules()
            
    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for layer in self.layers:
            yield from layer.named_parameters()
            
    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]
    
    def set_trainable(self, flag: bool) -> "ModelGraph":
        for p in self.parameters():
            p.requires_grad = flag
            if not flag:
                p.grad = None
        return self

    def bn_layers(self) -> list[BatchNorm2d]:
        return [m for m in self.modules() if isinstance(m, BatchNorm2d)]
    
    def bn_running_stats(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [(bn.running_mean, bn.running_sigma) for bn in self.bn_layers()]
    
    def quantizable_layers(self) -> list[Module]:
        return [m for m in self.modules() if isinstance(m, (Conv2d, Linear))]
    
    def module_by_name(self, name: str) -> Module:
        for m in self.modules():
            if m.name == name:
                return m
        raise KeyError(name)
    
    def block_of(self, layer_name: str) -> int:
        top = int(layer_name.split(".")[1])
        for idx, (start, end) in enumerate(self.block_boundaries):
            if start <= top < end:
                return idx
        raise KeyError(layer_name)
    
    def train(self) -> "ModelGraph":
        self.training = True
        return self
    
    def eval(self) -> "ModelGraph":
        self.training = False
        return self
    
    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        for layer in self.layers:
            state.update(dict(layer.named_buffers()))
        return state
    
    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        expected = set(self.state_dict())
        missing = expected - set(state)
        if missing:
            raise ConfigError(f"State is missing tensors: {sorted(missing)[:5]}")
        modules = {m.name: m for m in self.modules()}
        for key in sorted(expected):
            module_name, attr = key.rsplit(".", 1)
            modules[module_name].load_tensor(attr, state[key])
            
    def forward(self, x: Tensor, ctx: Optional[ForwardContext] = None) -> Tensor:
        ctx = ctx or ForwardContext(training=self.training)
        return run_layers(self.layers, x, ctx)
    
    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)


def _arch_error(message: str) -> ConfigError:
    return ConfigError(f"inconsistent channel spec: {message}")


class _Builder:
    
    def __init__(self, arch: ArchConfig):
        self.arch = arch
        self.rng = np.random.default_rng(arch.seed)
        
    def build_list(
        self,
        specs: list[LayerSpec],
        state: tuple[int, int, bool],
        prefix: str
    ) -> tuple[list[Module], tuple[int, int, bool]]:
        channels, spatial, flat = state
        layers: list[Module] = []
        
        for idx, spec in enumerate(specs):
            name = f"{prefix}.{idx}"
            if spec.kind == "conv":
                if flat:
                    raise _arch_error(f"{name}: conv after flatten")
                if spec.out_channels is None:
                    raise _arch_error(f"{name}: conv needs out_channels")
                nxt = specs[idx + 1].kind if idx + 1 < len(specs) else None
                if nxt != "bn":
                    raise _arch_error(f"{name}: every conv must be followed by bn")
                padding = spec.kernel // 2 if spec.padding is None else spec.padding
                if spatial + 2 * padding < spec.kernel:
                    raise _arch_error(f"{name}: kernel larger than padded input")
                layer = Conv2d(channels, spec.out_channels, spec.kernel, spec.stride, padding, spec.bias, self.rng)
                channels = spec.out_channels
                spatial = conv_output_size(spatial, spec.kernel, spec.stride, padding)
            elif spec.kind == "bn":
                if flat:
                    raise _arch_error(f"{name}: bn after flatten")
                layer = BatchNorm2d(channels, momentum=self.arch.bn_momentum)
            elif spec.kind == "relu":
                layer = ReLU()
            elif spec.kind == "leaky_relu":
                layer = LeakyReLU(spec.slope)
            elif spec.kind == "avg_pool":
                if flat or spatial % spec.kernel:
                    raise _arch_error(f"{name}: avg_pool kernel {spec.kernel} does not tile {spatial}")
                layer = AvgPool2d(spec.kernel)
                spatial //= spec.kernel
            elif spec.kind == "global_avg_pool":
                layer = GlobalAvgPool()
                spatial, flat = 1, True
            elif spec.kind == "flatten":
                layer = Flatten()
                if not flat:
                    channels, spatial, flat = channels * spatial * spatial, 1, True
            elif spec.kind == "upsample":
                layer = Upsample()
                spatial *= 2
            elif spec.kind == "linear":
                if not flat:
                    raise _arch_error(f"{name}: linear needs flattened input")
                if spec.out_channels is None:
                    raise _arch_error(f"{name}: linear needs out_channels")
                layer = Linear(channels, spec.out_channels, self.rng)
                channels = spec.out_channels
            elif spec.kind == "residual_block":
                body, body_state = self.build_list(spec.body, (channels, spatial, flat), f"{name}.body")
                if spec.shortcut:
                    shortcut, short_state = self.build_list(spec.shortcut, (channels, spatial, flat), f"{name}.shortcut")
                else:
                    shortcut, short_state = [], (channels, spatial, flat)
                if not body or body_state != short_state:
                    raise _arch_error(f"{name}: body output {body_state[:2]} != shortcut output {short_state[:2]}")
                layer = ResidualBlock(body, shortcut)
                channels, spatial, flat = body_state
            else:
                raise _arch_error(f"{name}: unknown layer kind {spec.kind}")
            
            layer.name = name
            layers.append(layer)
            
        return layers, (channels, spatial, flat)


def _block_boundaries(specs: list[LayerSpec]) -> list[tuple[int, int]]:
    boundaries = []
    start = 0
    for idx, spec in enumerate(specs):
        if spec.kind == "residual_block":
            if start < idx:
                boundaries.append((start, idx))
            boundaries.append((idx, idx + 1))
            start = idx + 1
        elif spec.kind in ACTIVATION_KINDS:
            boundaries.append((start, idx + 1))
            start = idx + 1
    if start < len(specs):
        boundaries.append((start, len(specs)))
    return boundaries


def build_model(arch: ArchConfig) -> ModelGraph:
    """Build and deterministically initialize a classifier from its config."""
    builder = _Builder(arch)
    layers, (channels, _, flat) = builder.build_list(
        arch.layers, (arch.in_channels, arch.input_size, False), "layers"
    )
    if not flat or channels != arch.num_classes:
        raise _arch_error(f"model ends with {channels} features (flat={flat}), expected {arch.num_classes} logits")
    
    model = ModelGraph(arch=arch, layers=layers, block_boundaries=_block_boundaries(arch.layers))
    if not model.bn_layers():
        raise _arch_error("classifier has no batch-norm layers")
    logger.info(
        f"Built {arch.name}: {len(model.parameters())} parameter tensors, "
        f"{len(model.bn_layers())} BN layers, {len(model.block_boundaries)} blocks"
    )
    return model.eval()


def forward_block(
    model: ModelGraph,
    block_idx: int,
    x: Tensor,
    ctx: Optional[ForwardContext] = None
) -> Tensor:
    if not 0 <= block_idx < len(model.block_boundaries):
        raise IndexError(f"Block index {block_idx} out of range (0..{len(model.block_boundaries) - 1})")
    start, end = model.block_boundaries[block_idx]
    ctx = ctx or ForwardContext(training=model.training)
    return run_layers(model.layers[start:end], x, ctx)


def forward_with_taps(
    model: ModelGraph,
    x: Tensor,
    taps: Optional[TapRequest] = None,
    ctx: Optional[ForwardContext] = None
) -> tuple[Tensor, TapRecord]:
    """Forward pass recording BN batch statistics and/or block outputs.

    Requesting BN stats makes every BN normalize with the batch statistics of
    ``x`` (running stats are left untouched) so the recorded (mu, sigma) are
    differentiable functions of the input.
    """
    taps = taps or TapRequest()
    size = model.arch.input_size
    if x.ndim != 4 or x.shape[1:] != (model.arch.in_channels, size, size):
        raise ConfigError(f"Input shape {x.shape} does not match arch input (C={model.arch.in_channels}, {size}x{size})")
    if taps.bn_stats and not model.bn_layers():
        raise ConfigError("BN stats requested from a model without batch-norm layers")
    
    record = TapRecord()
    if ctx is None:
        ctx = ForwardContext(training=model.training)
    ctx.batch_stats = ctx.batch_stats or taps.bn_stats
    ctx.bn_taps = record.bn_stats if taps.bn_stats else None
    ctx.swing = taps.swing
    
    out = x
    for block_idx in range(len(model.block_boundaries)):
        out = forward_block(model, block_idx, out, ctx)
        if taps.block_outputs:
            record.block_outputs.append(out)
    return out, record


def model_hash(model: ModelGraph) -> str:
    digest = hashlib.sha256()
    digest.update(model.arch.model_dump_json().encode("utf-8"))
    for key, value in sorted(model.state_dict().items()):
        digest.update(key.encode("utf-8"))
        digest.update(np.ascontiguousarray(value).tobytes())
    return digest.hexdigest()
