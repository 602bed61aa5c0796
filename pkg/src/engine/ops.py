"""Differentiable operators on :class:`Tensor`.

Every op computes its forward with numpy and registers a backward closure
returning one gradient per parent (``None`` where no gradient flows).
Broadcasting is restricted to scalar and per-channel operands: the result
shape must equal one of the operand shapes.
"""

import logging
from typing import Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import as_strided

from src.engine.tensor import Tensor, check_finite
from src.errors import NumericError, ShapeError

logger = logging.getLogger(__name__)

Operand = Union[Tensor, float, int, np.ndarray]

BN_EPS = 1e-5


def as_tensor(value: Operand, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value), dtype=dtype)


def _pair(a: Operand, b: Operand) -> tuple[Tensor, Tensor]:
    like = a if isinstance(a, Tensor) else b if isinstance(b, Tensor) else None
    return as_tensor(a, like), as_tensor(b, like)


def _broadcast_shape(sa: tuple[int, ...], sb: tuple[int, ...]) -> tuple[int, ...]:
    if sa == sb:
        return sa
    try:
        out = np.broadcast_shapes(sa, sb)
    except ValueError as e:
        raise ShapeError(f"Incompatible shapes {sa} and {sb}") from e
    if out != sa and out != sb:
        raise ShapeError(f"Only scalar and per-channel broadcasting is supported: {sa} vs {sb}")
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# Elementwise

def add(a: Operand, b: Operand) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a.shape, b.shape)

    def _backward(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return Tensor.from_op(a.data + b.data, (a, b), _backward)


def sub(a: Operand, b: Operand) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a.shape, b.shape)

    def _backward(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(-g, b.shape) if b.requires_grad else None,
        )

    return Tensor.from_op(a.data - b.data, (a, b), _backward)


def mul(a: Operand, b: Operand) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a.shape, b.shape)

    def _backward(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return Tensor.from_op(a.data * b.data, (a, b), _backward)


def div(a: Operand, b: Operand) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a.shape, b.shape)
    if np.any(b.data == 0):
        raise NumericError("Division by zero")

    def _backward(g):
        return (
            _unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None,
        )

    return Tensor.from_op(a.data / b.data, (a, b), _backward)


def neg(a: Tensor) -> Tensor:
    return Tensor.from_op(-a.data, (a,), lambda g: (-g,))


def pow(a: Tensor, exponent: float) -> Tensor:
    out = np.power(a.data, exponent)

    def _backward(g):
        return (g * exponent * np.power(a.data, exponent - 1),)

    return Tensor.from_op(out, (a,), _backward)


def abs(a: Tensor) -> Tensor:
    return Tensor.from_op(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise NumericError("sqrt of a negative value")
    out = np.sqrt(a.data)
    return Tensor.from_op(out, (a,), lambda g: (g * 0.5 / out,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor.from_op(out, (a,), lambda g: (g * out,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor.from_op(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    mask = a.data > 0
    scale = np.where(mask, 1.0, slope).astype(a.dtype)
    return Tensor.from_op(a.data * scale, (a,), lambda g: (g * scale,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor.from_op(out, (a,), lambda g: (g * (1 - out * out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype)


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return Tensor.from_op(out, (a,), lambda g: (g * out * (1 - out),))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient passes only where lo <= a <= hi."""
    mask = (a.data >= lo) & (a.data <= hi)
    return Tensor.from_op(np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,))


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def round_ste(a: Tensor) -> Tensor:
    """Round half away from zero; backward is the identity."""
    return Tensor.from_op(round_half_away(a.data), (a,), lambda g: (g,))


def floor_ste(a: Tensor) -> Tensor:
    return Tensor.from_op(np.floor(a.data), (a,), lambda g: (g,))


def grad_scale(a: Tensor, scale: float) -> Tensor:
    return Tensor.from_op(a.data, (a,), lambda g: (g * scale,))


def where(mask: np.ndarray, a: Operand, b: Operand) -> Tensor:
    """Select ``a`` where ``mask`` holds, else ``b``; ``mask`` is constant."""
    a, b = _pair(a, b)
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, a.data, b.data)
    shape = out.shape

    def _backward(g):
        return (
            _unbroadcast(np.where(mask, g, 0).astype(g.dtype).reshape(shape), a.shape),
            _unbroadcast(np.where(mask, 0, g).astype(g.dtype).reshape(shape), b.shape),
        )

    return Tensor.from_op(out, (a, b), _backward)


# Shape and reductions

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"Cannot reshape {a.shape} into {tuple(shape)}") from e
    return Tensor.from_op(out, (a,), lambda g: (g.reshape(a.shape),))


def astype(a: Tensor, dtype) -> Tensor:
    """Cast to another float dtype; the gradient is cast back."""
    if a.dtype == np.dtype(dtype):
        return a
    return Tensor.from_op(a.data.astype(dtype), (a,), lambda g: (g.astype(a.dtype),))


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def _backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor.from_op(out, (a,), _backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(a.data.mean(axis=axis, keepdims=keepdims))
    count = a.data.size // max(out.size, 1) if axis is not None else a.data.size

    def _backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).astype(a.dtype),)

    return Tensor.from_op(out, (a,), _backward)


def crop2d(a: Tensor, top: int, left: int, height: int, width: int) -> Tensor:
    if top < 0 or left < 0 or top + height > a.shape[2] or left + width > a.shape[3]:
        raise ShapeError(f"Crop window ({top}, {left}, {height}, {width}) outside {a.shape}")
    out = a.data[:, :, top:top + height, left:left + width]

    def _backward(g):
        full = np.zeros_like(a.data)
        full[:, :, top:top + height, left:left + width] = g
        return (full,)

    return Tensor.from_op(np.ascontiguousarray(out), (a,), _backward)


def _reflect_index(n: int, before: int, after: int) -> np.ndarray:
    idx = np.abs(np.arange(-before, n + after))
    return np.where(idx >= n, 2 * (n - 1) - idx, idx)


def reflection_pad2d(a: Tensor, pad: tuple[int, int, int, int]) -> Tensor:
    """Mirror-pad the last two dims by (left, right, top, bottom).

    The border pixel itself is not repeated, so every pad must be smaller
    than the corresponding dim.
    """
    left, right, top, bottom = pad
    h, w = a.shape[-2], a.shape[-1]
    if min(pad) < 0 or max(left, right) >= w or max(top, bottom) >= h:
        raise ShapeError(f"Reflection pad {pad} too large for spatial dims {(h, w)}")
    if pad == (0, 0, 0, 0):
        return Tensor.from_op(a.data.copy(), (a,), lambda g: (g,))

    rows = _reflect_index(h, top, bottom)
    cols = _reflect_index(w, left, right)
    out = a.data[..., rows, :][..., cols]

    def _backward(g):
        by_cols = np.zeros(g.shape[:-1] + (w,), dtype=g.dtype)
        np.add.at(np.moveaxis(by_cols, -1, 0), cols, np.moveaxis(g, -1, 0))
        full = np.zeros_like(a.data)
        np.add.at(np.moveaxis(full, -2, 0), rows, np.moveaxis(by_cols, -2, 0))
        return (full,)

    return Tensor.from_op(out, (a,), _backward)


# Layers

def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    n, c, h, w = xp.shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    s_n, s_c, s_h, s_w = xp.strides
    patches = as_strided(
        xp,
        shape=(n, c, kh, kw, ho, wo),
        strides=(s_n, s_c, s_h, s_w, stride * s_h, stride * s_w),
        writeable=False,
    )
    return patches.reshape(n, c * kh * kw, ho * wo)


def _col2im(cols: np.ndarray, padded_shape: tuple, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = padded_shape[:2]
    out = np.zeros(padded_shape, dtype=cols.dtype)
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    for i in range(kh):
        h_end = i + stride * ho
        for j in range(kw):
            w_end = j + stride * wo
            out[:, :, i:h_end:stride, j:w_end:stride] += cols[:, :, i, j]
    return out


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0
) -> Tensor:
    """NCHW convolution with symmetric zero padding, via im2col + matmul."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, i, kh, kw = weight.shape
    if c != i:
        raise ShapeError(f"Input has {c} channels but weight expects {i}")
    if stride < 1:
        raise ShapeError(f"Stride must be >= 1, got {stride}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError(f"Padded input {(h + 2 * padding, w + 2 * padding)} smaller than kernel {(kh, kw)}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"Bias shape {bias.shape} does not match {o} output channels")
    check_finite(x.data, "conv2d input")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    ho = (xp.shape[2] - kh) // stride + 1
    wo = (xp.shape[3] - kw) // stride + 1
    cols = np.ascontiguousarray(_im2col(np.ascontiguousarray(xp), kh, kw, stride))
    w_mat = weight.data.reshape(o, -1)
    out = np.matmul(w_mat, cols)
    if bias is not None:
        out = out + bias.data.reshape(1, o, 1)
    out = out.reshape(n, o, ho, wo)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def _backward(g):
        g_mat = g.reshape(n, o, ho * wo)
        grad_w = grad_x = None
        if weight.requires_grad:
            grad_w = np.matmul(g_mat, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        if x.requires_grad:
            grad_cols = np.matmul(w_mat.T, g_mat)
            grad_xp = _col2im(grad_cols, xp.shape, kh, kw, stride, ho, wo)
            grad_x = grad_xp[:, :, padding:padding + h, padding:padding + w] if padding else grad_xp
        grads = [grad_x, grad_w]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)) if bias.requires_grad else None)
        return grads

    return Tensor.from_op(out, parents, _backward)


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    training: bool,
    running_mean: Optional[np.ndarray] = None,
    running_var: Optional[np.ndarray] = None,
    eps: float = BN_EPS
) -> tuple[Tensor, Tensor, Tensor]:
    """Batch normalization returning (output, batch_mu, batch_sigma).

    In training mode the batch statistics are differentiable outputs and
    ``batch_sigma = sqrt(biased_var + eps)``. In eval mode the running
    statistics are used and returned as constants.
    """
    if x.ndim != 4:
        raise ShapeError(f"batchnorm2d expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"Input has {c} channels but affine params are {gamma.shape}/{beta.shape}")
    g4 = reshape(gamma, (1, c, 1, 1))
    b4 = reshape(beta, (1, c, 1, 1))

    if training:
        if n * h * w <= 1:
            raise NumericError("Batch statistics need more than one value per channel (zero variance)")
        mu = mean(x, axis=(0, 2, 3), keepdims=True)
        centered = sub(x, mu)
        var = mean(mul(centered, centered), axis=(0, 2, 3), keepdims=True)
        sigma = sqrt(add(var, eps))
        out = add(mul(div(centered, sigma), g4), b4)
        return out, reshape(mu, (c,)), reshape(sigma, (c,))

    if running_mean is None or running_var is None:
        raise ShapeError("Eval-mode batchnorm needs running statistics")
    mu_c = Tensor(running_mean.reshape(1, c, 1, 1), dtype=x.dtype)
    sigma_c = Tensor(np.sqrt(running_var + eps).reshape(1, c, 1, 1), dtype=x.dtype)
    out = add(mul(div(sub(x, mu_c), sigma_c), g4), b4)
    return out, reshape(mu_c, (c,)), reshape(sigma_c, (c,))


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def _backward(g):
        grads = [
            g @ weight.data if x.requires_grad else None,
            g.T @ x.data if weight.requires_grad else None,
        ]
        if bias is not None:
            grads.append(g.sum(axis=0) if bias.requires_grad else None)
        return grads

    return Tensor.from_op(out, parents, _backward)


def upsample_nearest2x(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"upsample expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    return Tensor.from_op(out, (x,), lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),))


def avg_pool2d(x: Tensor, kernel: int) -> Tensor:
    n, c, h, w = x.shape
    if h % kernel or w % kernel:
        raise ShapeError(f"avg_pool2d kernel {kernel} does not tile spatial dims {(h, w)}")
    out = x.data.reshape(n, c, h // kernel, kernel, w // kernel, kernel).mean(axis=(3, 5))

    def _backward(g):
        g = g / (kernel * kernel)
        return (np.repeat(np.repeat(g, kernel, axis=2), kernel, axis=3),)

    return Tensor.from_op(out, (x,), _backward)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects NCHW input, got {x.shape}")
    return mean(x, axis=(2, 3))


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy over the batch."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= logits.shape[1]:
        raise ShapeError("cross_entropy: label out of range")
    n = logits.shape[0]
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    loss = np.asarray(-log_probs[np.arange(n), labels].mean(), dtype=logits.dtype)

    def _backward(g):
        grad = np.exp(log_probs)
        grad[np.arange(n), labels] -= 1
        return (grad * (g / n),)

    return Tensor.from_op(loss, (logits,), _backward)
