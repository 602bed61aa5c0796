import logging
import math
from dataclasses import dataclass
from typing import Any, Iterator, Optional, Protocol

import numpy as np

from src.engine import ops
from src.engine.tensor import Tensor

logger = logging.getLogger(__name__)


class SwingHook(Protocol):
    def conv(self, x: Tensor, weight: Tensor, bias: Optional[Tensor], stride: int, padding: int) -> Tensor:
        ...


class QuantHook(Protocol):
    def transform(self, layer: "Module", x: Tensor, weight: Tensor) -> tuple[Tensor, Tensor]:
        ...


@dataclass
class ForwardContext:
    """Per-call switches threaded through every layer.

    training:     BN normalizes with batch stats and updates running stats.
    batch_stats:  BN normalizes with batch stats but leaves running stats alone.
    bn_taps:      when a list, every BN appends its (batch_mu, batch_sigma).
    swing:        routes stride>1 convs through swing convolution.
    quant:        replaces conv/linear inputs and weights by quantized ones.
    """

    training: bool = False
    batch_stats: bool = False
    bn_taps: Optional[list[tuple[Tensor, Tensor]]] = None
    swing: Optional[SwingHook] = None
    quant: Optional[QuantHook] = None


class Module:
    
    name: str = ""
    
    def forward(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        raise NotImplementedError
        
    def __call__(self, x: Tensor, ctx: Optional[ForwardContext] = None) -> Tensor:
        return self.forward(x, ctx or ForwardContext())
        
    def children(self) -> list["Module"]:
        return []
    
    def own_parameters(self) -> dict[str, Tensor]:
        return {}
    
    def own_buffers(self) -> dict[str, np.ndarray]:
        return {}
    
    def modules(self) -> Iterator["Module"]:
        yield self
        for child in self.children():
            yield from child.modules()
            
    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for module in self.modules():
            for key, param in module.own_parameters().items():
                yield f"{module.name}.{key}", param
                
    def named_buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        for module in self.modules():
            for key, buf in module.own_buffers().items():
                yield f"{module.name}.{key}", buf
                
    def load_tensor(self, key: str, value: np.ndarray) -> None:
        params = self.own_parameters()
        if key in params:
            params[key].data = value.astype(params[key].dtype, copy=True)
        else:
            setattr(self, key, value.astype(np.float32, copy=True))
            
    def describe(self) -> dict[str, Any]:
        return {"kind": type(self).__name__}


def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Conv2d(Module):
    
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel: int,
        stride: int = 1,
        padding: int = 0,
        bias: bool = False,
        rng: Optional[np.random.Generator] = None
    ):
        rng = rng or np.random.default_rng(0)
        fan_in = in_channels * kernel * kernel
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.padding = padding
        self.weight = Tensor(
            kaiming_uniform(rng, (out_channels, in_channels, kernel, kernel), fan_in),
            requires_grad=True
        )
        self.bias: Optional[Tensor] = None
        if bias:
            bound = 1.0 / math.sqrt(fan_in)
            self.bias = Tensor(rng.uniform(-bound, bound, out_channels).astype(np.float32), requires_grad=True)
            
    def forward(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        weight = self.weight
        if ctx.quant is not None:
            x, weight = ctx.quant.transform(self, x, weight)
        if ctx.swing is not None and self.stride > 1:
            return ctx.swing.conv(x, weight, self.bias, self.stride, self.padding)
        return ops.conv2d(x, weight, self.bias, self.stride, self.padding)
    
    def own_parameters(self) -> dict[str, Tensor]:
        params = {"weight": self.weight}
        if self.bias is not None:
            params["bias"] = self.bias
        return params
    
    def describe(self) -> dict[str, Any]:
        return {
            "kind": "conv",
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "kernel": self.kernel,
            "stride": self.stride,
        }


class BatchNorm2d(Module):
    
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = ops.BN_EPS):
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(channels, dtype=np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=np.float32), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)
        
    @property
    def running_sigma(self) -> np.ndarray:
        return np.sqrt(self.running_var + self.eps)
    
    def forward(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        use_batch = ctx.training or ctx.batch_stats
        out, mu, sigma = ops.batchnorm2d(
            x, self.gamma, self.beta, use_batch,
            self.running_mean, self.running_var, self.eps
        )
        if ctx.training and not ctx.batch_stats:
            m = self.momentum
            batch_var = x.data.var(axis=(0, 2, 3))
            self.running_mean = ((1 - m) * self.running_mean + m * mu.data).astype(np.float32)
            self.running_var = ((1 - m) * self.running_var + m * batch_var).astype(np.float32)
        if ctx.bn_taps is not None:
            ctx.bn_taps.append((mu, sigma))
        return out
    
    def own_parameters(self) -> dict[str, Tensor]:
        return {"gamma": self.gamma, "beta": self.beta}
    
    def own_buffers(self) -> dict[str, np.ndarray]:
        return {"running_mean": self.running_mean, "running_var": self.running_var}
    
    def describe(self) -> dict[str, Any]:
        return {"kind": "bn", "channels": self.channels}


class ReLU(Module):
    
    def forward(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        return ops.relu(x)


class LeakyReLU(Module):
    
    def __init__(self, slope: float = 0.2):
        self.slope = slope
        
    def forward(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        return ops.leaky_relu(x, self.slope)


class Tanh(Module):
    
    def forward(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        return ops.tanh(x)


class Linear(Module):
    
    def __init__(self, in_features: int, out_features: int, rng: Optional[np.random.Generator] = None):
        rng = rng or np.random.default_rng(0)
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Tensor(kaiming_uniform(rng, (out_features, in_features), in_features), requires_grad=True)
        bound = 1.0 / math.sqrt(in_features)
        self.bias = Tensor(rng.uniform(-bound, bound, out_features).astype(np.float32), requires_grad=True)
        
    def forward(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        weight = self.weight
        if ctx.quant is not None:
            x, weight = ctx.quant.transform(self, x, weight)
        return ops.linear(x, weight, self.bias)
    
    def own_parameters(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}
    
    def describe(self) -> dict[str, Any]:
        return {"kind": "linear", "in_features": self.in_features, "out_features": self.out_features}


class AvgPool2d(Module):
    
    def __init__(self, kernel: int):
        self.kernel = kernel
        
    def forward(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        return ops.avg_pool2d(x, self.kernel)


class GlobalAvgPool(Module):
    
    def forward(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        return ops.global_avg_pool(x)


class Flatten(Module):
    
    def forward(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        return ops.reshape(x, (x.shape[0], -1))


class Reshape(Module):
    
    def __init__(self, shape: tuple[int, ...]):
        self.shape = tuple(shape)
        
    def forward(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        return ops.reshape(x, (x.shape[0], *self.shape))


class Upsample(Module):
    
    def forward(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        return ops.upsample_nearest2x(x)


class ResidualBlock(Module):
    """relu(body(x) + shortcut(x)); an empty shortcut is the identity."""

    def __init__(self, body: list[Module], shortcut: Optional[list[Module]] = None):
        self.body = list(body)
        self.shortcut = list(shortcut or [])
        
    def forward(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        y = run_layers(self.body, x, ctx)
        s = run_layers(self.shortcut, x, ctx) if self.shortcut else x
        return ops.relu(ops.add(y, s))
    
    def children(self) -> list[Module]:
        return [*self.body, *self.shortcut]
    
    def describe(self) -> dict[str, Any]:
        return {"kind": "residual_block", "body": len(self.body), "shortcut": len(self.shortcut)}


def run_layers(layers: list[Module], x: Tensor, ctx: ForwardContext) -> Tensor:
    for layer in layers:
        x = layer.forward(x, ctx)
    return x
