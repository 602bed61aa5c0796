"""
Tests for the autodiff engine: forward oracles and finite-difference gradients.
"""

import math

import numpy as np
import pytest
from pathlib import Path
import sys

sys.path.insert(0, str(Path(__file__).parent.parent))

from src.engine import Tensor, backward, no_grad, ops
from src.errors import GraphError, NumericError, ShapeError


def numeric_grad(fn, arrays, k, h=1e-6):
    """Central differences of scalar ``fn`` w.r.t. ``arrays[k]``."""
    grad = np.zeros_like(arrays[k])
    for idx in np.ndindex(arrays[k].shape):
        plus = [a.copy() for a in arrays]
        minus = [a.copy() for a in arrays]
        plus[k][idx] += h
        minus[k][idx] -= h
        f_plus = fn(*[Tensor(a) for a in plus]).item()
        f_minus = fn(*[Tensor(a) for a in minus]).item()
        grad[idx] = (f_plus - f_minus) / (2 * h)
    return grad


def check_grads(fn, arrays, rtol=1e-5, atol=1e-7):
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    backward(fn(*tensors))
    for k, t in enumerate(tensors):
        np.testing.assert_allclose(t.grad, numeric_grad(fn, arrays, k), rtol=rtol, atol=atol)


def weighted(out, seed=99):
    """Reduce to a scalar with fixed random weights so every output element matters."""
    r = np.random.default_rng(seed).standard_normal(out.shape)
    return ops.sum(ops.mul(out, Tensor(r, dtype=out.dtype)))


def away_from(x, points, margin=0.02):
    """Push values off the kinks of piecewise ops."""
    x = x.copy()
    for p in points:
        close = np.abs(x - p) < margin
        x[close] += 2 * margin
    return x


class TestElementwiseGradients:
    """Finite differences in float64 on random instances."""
    
    @pytest.mark.parametrize("seed", range(20))
    def test_binary_ops(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.standard_normal((2, 3))
        b = rng.uniform(0.5, 2.0, (2, 3)) * rng.choice([-1, 1], (2, 3))
        for op in (ops.add, ops.sub, ops.mul, ops.div):
            check_grads(lambda x, y: weighted(op(x, y)), [a, b])
    
    @pytest.mark.parametrize("seed", range(20))
    def test_unary_ops(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((3, 4))
        pos = rng.uniform(0.5, 2.0, (3, 4))
        kinked = away_from(x, [0.0])
        check_grads(lambda t: weighted(ops.tanh(t)), [x])
        check_grads(lambda t: weighted(ops.sigmoid(t)), [x])
        check_grads(lambda t: weighted(ops.exp(t)), [x])
        check_grads(lambda t: weighted(ops.neg(t)), [x])
        check_grads(lambda t: weighted(ops.sqrt(t)), [pos])
        check_grads(lambda t: weighted(ops.pow(t, 2.5)), [pos])
        check_grads(lambda t: weighted(ops.relu(t)), [kinked])
        check_grads(lambda t: weighted(ops.leaky_relu(t, 0.2)), [kinked])
        check_grads(lambda t: weighted(ops.abs(t)), [kinked])
    
    @pytest.mark.parametrize("seed", range(20))
    def test_clamp(self, seed):
        x = away_from(np.random.default_rng(seed).standard_normal((4, 4)), [-0.5, 0.5])
        check_grads(lambda t: weighted(ops.clamp(t, -0.5, 0.5)), [x])
    
    @pytest.mark.parametrize("seed", range(20))
    def test_per_channel_broadcast(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((2, 3, 4, 4))
        c = rng.standard_normal((1, 3, 1, 1))
        check_grads(lambda a, b: weighted(ops.mul(a, b)), [x, c])
        check_grads(lambda a, b: weighted(ops.add(a, b)), [x, c])
    
    def test_tanh_gradient_precision(self):
        x = Tensor(np.array([0.3]), requires_grad=True)
        backward(ops.sum(ops.tanh(x)))
        h = 1e-6
        numeric = (math.tanh(0.3 + h) - math.tanh(0.3 - h)) / (2 * h)
        assert abs(x.grad[0] - numeric) / abs(numeric) <= 1e-8


class TestShapeGradients:
    
    @pytest.mark.parametrize("seed", range(20))
    def test_reductions_and_reshape(self, seed):
        x = np.random.default_rng(seed).standard_normal((2, 3, 4))
        check_grads(lambda t: weighted(ops.sum(t, axis=1)), [x])
        check_grads(lambda t: weighted(ops.mean(t, axis=(0, 2), keepdims=True)), [x])
        check_grads(lambda t: ops.mean(t), [x])
        check_grads(lambda t: weighted(ops.reshape(t, (6, 4))), [x])
    
    @pytest.mark.parametrize("seed", range(20))
    def test_spatial_ops(self, seed):
        x = np.random.default_rng(seed).standard_normal((2, 2, 4, 4))
        check_grads(lambda t: weighted(ops.crop2d(t, 1, 0, 2, 3)), [x])
        check_grads(lambda t: weighted(ops.reflection_pad2d(t, (1, 2, 2, 1))), [x])
        check_grads(lambda t: weighted(ops.upsample_nearest2x(t)), [x])
        check_grads(lambda t: weighted(ops.avg_pool2d(t, 2)), [x])
        check_grads(lambda t: weighted(ops.global_avg_pool(t)), [x])


class TestLayerGradients:
    
    @pytest.mark.parametrize("seed", range(20))
    def test_conv2d(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((2, 2, 5, 5))
        w = rng.standard_normal((3, 2, 3, 3))
        b = rng.standard_normal(3)
        check_grads(lambda a, k, c: weighted(ops.conv2d(a, k, c, stride=1, padding=0)), [x, w, b])
        check_grads(lambda a, k: weighted(ops.conv2d(a, k, None, stride=2, padding=1)), [x, w])
    
    def test_conv2d_frozen_weight(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((2, 2, 6, 6))
        w = rng.standard_normal((3, 2, 3, 3))
        b = rng.standard_normal(3)
        reference = [Tensor(x, requires_grad=True), Tensor(w, requires_grad=True), Tensor(b, requires_grad=True)]
        backward(weighted(ops.conv2d(*reference, stride=2, padding=1)))

        xt, wt, bt = Tensor(x, requires_grad=True), Tensor(w), Tensor(b)
        out = ops.conv2d(xt, wt, bt, stride=2, padding=1)
        grads = out._backward(np.ones(out.shape))
        assert grads[1] is None and grads[2] is None
        backward(weighted(out))
        np.testing.assert_array_equal(xt.grad, reference[0].grad)
        assert wt.grad is None and bt.grad is None
    
    def test_linear_and_mul_frozen_operands(self):
        x = Tensor(np.ones((2, 3)), requires_grad=True)
        w = Tensor(np.full((4, 3), 0.5))
        out = ops.linear(x, w, Tensor(np.zeros(4)))
        grads = out._backward(np.ones(out.shape))
        assert grads[1] is None and grads[2] is None
        np.testing.assert_allclose(grads[0], np.full((2, 3), 2.0))

        scaled = ops.mul(x, Tensor(np.full((2, 3), 3.0)))
        assert scaled._backward(np.ones((2, 3)))[1] is None
    
    @pytest.mark.parametrize("seed", range(20))
    def test_batchnorm_training(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((3, 2, 3, 3))
        gamma = rng.uniform(0.5, 1.5, 2)
        beta = rng.standard_normal(2)

        def fn(a, g, b):
            out, mu, sigma = ops.batchnorm2d(a, g, b, training=True)
            return ops.add(weighted(out), ops.add(weighted(mu, 1), weighted(sigma, 2)))

        check_grads(fn, [x, gamma, beta])
    
    @pytest.mark.parametrize("seed", range(20))
    def test_linear_and_cross_entropy(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((4, 5))
        w = rng.standard_normal((3, 5))
        b = rng.standard_normal(3)
        labels = rng.integers(0, 3, 4)
        check_grads(lambda a, k, c: weighted(ops.linear(a, k, c)), [x, w, b])
        check_grads(lambda a: ops.cross_entropy(a, labels), [rng.standard_normal((4, 3))])
    
    def test_conv_bn_relu_composite(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((2, 2, 5, 5))
        w = rng.standard_normal((3, 2, 3, 3))
        gamma = rng.uniform(0.5, 1.5, 3)
        beta = rng.standard_normal(3)

        def fn(a, k, g, b):
            y = ops.conv2d(a, k, None, stride=2, padding=1)
            y, _, _ = ops.batchnorm2d(y, g, b, training=True)
            return ops.sum(ops.relu(y))

        check_grads(fn, [x, w, gamma, beta], rtol=1e-5)


class TestForwardOracles:
    
    def test_conv_all_ones(self):
        x = Tensor(np.ones((1, 1, 5, 5)))
        w = Tensor(np.ones((1, 1, 3, 3)))
        out = ops.conv2d(x, w, stride=1, padding=1)
        assert out.data[0, 0, 2, 2] == 9.0
        assert out.data[0, 0, 0, 0] == 4.0
    
    def test_conv_identity_kernel(self):
        x = np.random.default_rng(0).standard_normal((2, 3, 6, 6)).astype(np.float32)
        w = np.zeros((3, 3, 1, 1), dtype=np.float32)
        w[np.arange(3), np.arange(3)] = 1.0
        out = ops.conv2d(Tensor(x), Tensor(w))
        np.testing.assert_array_equal(out.data, x)
    
    def test_conv_matches_naive_loops(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((2, 3, 8, 8))
        w = rng.standard_normal((4, 3, 3, 3))
        stride, pad = 2, 1
        out = ops.conv2d(Tensor(x), Tensor(w), stride=stride, padding=pad).data

        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        ho = (8 + 2 * pad - 3) // stride + 1
        ref = np.zeros((2, 4, ho, ho))
        for n in range(2):
            for o in range(4):
                for i in range(ho):
                    for j in range(ho):
                        for c in range(3):
                            for ki in range(3):
                                for kj in range(3):
                                    ref[n, o, i, j] += w[o, c, ki, kj] * xp[n, c, i * stride + ki, j * stride + kj]
        assert out.shape == (2, 4, 4, 4)
        np.testing.assert_allclose(out, ref, atol=1e-6)
    
    def test_batchnorm_on_standardized_input(self):
        x = np.random.default_rng(2).standard_normal((4, 2, 5, 5))
        x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
        out, mu, sigma = ops.batchnorm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), training=True)
        np.testing.assert_allclose(out.data, x, rtol=1e-5, atol=1e-6)
        np.testing.assert_allclose(mu.data, 0.0, atol=1e-12)
        np.testing.assert_allclose(sigma.data, math.sqrt(1 + ops.BN_EPS), rtol=1e-12)
    
    def test_batchnorm_eval_constant_input(self):
        x = Tensor(np.full((2, 3, 4, 4), 1.7))
        beta = np.array([0.1, -0.2, 0.3])
        out, _, _ = ops.batchnorm2d(
            x, Tensor(np.ones(3)), Tensor(beta), training=False,
            running_mean=np.full(3, 1.7), running_var=np.ones(3),
        )
        np.testing.assert_allclose(out.data, np.broadcast_to(beta.reshape(1, 3, 1, 1), x.shape), atol=1e-12)
    
    def test_batchnorm_two_pass_oracle(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((5, 3, 4, 4)) * 3 + 1
        gamma, beta = rng.uniform(0.5, 2, 3), rng.standard_normal(3)
        out, mu, sigma = ops.batchnorm2d(Tensor(x), Tensor(gamma), Tensor(beta), training=True)
        m = x.mean(axis=(0, 2, 3))
        v = ((x - m.reshape(1, 3, 1, 1)) ** 2).mean(axis=(0, 2, 3))
        ref = (x - m.reshape(1, 3, 1, 1)) / np.sqrt(v + ops.BN_EPS).reshape(1, 3, 1, 1)
        ref = ref * gamma.reshape(1, 3, 1, 1) + beta.reshape(1, 3, 1, 1)
        np.testing.assert_allclose(out.data, ref, atol=1e-6)
        np.testing.assert_allclose(mu.data, m, atol=1e-12)
        np.testing.assert_allclose(sigma.data, np.sqrt(v + ops.BN_EPS), atol=1e-12)
    
    def test_batchnorm_single_value_raises(self):
        with pytest.raises(NumericError):
            ops.batchnorm2d(Tensor(np.ones((1, 2, 1, 1))), Tensor(np.ones(2)), Tensor(np.zeros(2)), training=True)
    
    def test_reflection_pad_example(self):
        x = Tensor(np.array([1.0, 2.0, 3.0]).reshape(1, 1, 1, 3))
        out = ops.reflection_pad2d(x, (1, 1, 0, 0))
        np.testing.assert_array_equal(out.data.reshape(-1), [2.0, 1.0, 2.0, 3.0, 2.0])
    
    def test_reflection_pad_then_crop_is_identity(self):
        x = np.random.default_rng(4).standard_normal((2, 3, 5, 6))
        padded = ops.reflection_pad2d(Tensor(x), (2, 1, 1, 3))
        np.testing.assert_array_equal(ops.crop2d(padded, 1, 2, 5, 6).data, x)
    
    def test_reflection_pad_too_large(self):
        with pytest.raises(ShapeError):
            ops.reflection_pad2d(Tensor(np.zeros((1, 1, 3, 3))), (3, 0, 0, 0))
    
    def test_upsample(self):
        x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
        expected = np.array([
            [1, 1, 2, 2],
            [1, 1, 2, 2],
            [3, 3, 4, 4],
            [3, 3, 4, 4],
        ], dtype=np.float64)
        np.testing.assert_array_equal(ops.upsample_nearest2x(x).data[0, 0], expected)
    
    def test_cross_entropy_uniform_logits(self):
        loss = ops.cross_entropy(Tensor(np.zeros((3, 10))), np.array([0, 4, 9]))
        assert loss.item() == pytest.approx(math.log(10), abs=1e-6)
    
    def test_round_ste_and_clamp(self):
        x = Tensor(np.array([2.5, -2.5, 0.4]), requires_grad=True)
        out = ops.round_ste(x)
        np.testing.assert_array_equal(out.data, [3.0, -3.0, 0.0])
        backward(ops.sum(out))
        np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0])

        y = Tensor(np.array([5.0]), requires_grad=True)
        clamped = ops.clamp(y, 0.0, 4.0)
        assert clamped.item() == 4.0
        backward(ops.sum(clamped))
        assert y.grad[0] == 0.0
    
    def test_grad_scale(self):
        x = Tensor(np.array([1.5, -2.0]), requires_grad=True)
        out = ops.grad_scale(x, 0.25)
        np.testing.assert_array_equal(out.data, x.data)
        backward(ops.sum(out))
        np.testing.assert_array_equal(x.grad, [0.25, 0.25])
    
    def test_where_routes_gradient(self):
        a = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
        b = Tensor(np.array([10.0, 20.0, 30.0]), requires_grad=True)
        out = ops.where(np.array([True, False, True]), a, b)
        np.testing.assert_array_equal(out.data, [1.0, 20.0, 3.0])
        backward(ops.sum(out))
        np.testing.assert_array_equal(a.grad, [1.0, 0.0, 1.0])
        np.testing.assert_array_equal(b.grad, [0.0, 1.0, 0.0])


class TestBackward:
    
    def test_sum_gives_ones(self):
        w = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        backward(ops.sum(w))
        np.testing.assert_array_equal(w.grad, [1.0, 1.0])
    
    def test_sum_of_squares(self):
        w = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        backward(ops.sum(ops.mul(w, w)))
        np.testing.assert_array_equal(w.grad, [2.0, 4.0])
    
    def test_shared_subexpression_accumulates(self):
        w = Tensor(np.array([3.0]), requires_grad=True)
        y = ops.mul(w, 2.0)
        backward(ops.sum(ops.add(y, y)))
        np.testing.assert_array_equal(w.grad, [4.0])
    
    def test_non_scalar_loss_raises(self):
        w = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(GraphError):
            backward(ops.mul(w, 2.0))
    
    def test_non_finite_loss_raises(self):
        w = Tensor(np.array([np.inf]), requires_grad=True)
        with pytest.raises(NumericError):
            backward(ops.sum(w))
    
    def test_cycle_detected(self):
        a = Tensor(np.array([1.0]), requires_grad=True)
        b = ops.mul(a, 2.0)
        b._parents = (b,)
        with pytest.raises(GraphError):
            backward(b)
    
    def test_no_grad_records_nothing(self):
        w = Tensor(np.ones(2), requires_grad=True)
        with no_grad():
            out = ops.mul(w, 3.0)
        assert not out.requires_grad
        assert out.is_leaf
    
    def test_division_by_zero(self):
        with pytest.raises(NumericError):
            ops.div(Tensor(np.ones(2)), Tensor(np.array([1.0, 0.0])))
    
    def test_unsupported_broadcast(self):
        with pytest.raises(ShapeError):
            ops.add(Tensor(np.ones((2, 1))), Tensor(np.ones((1, 3))))
    
    def test_repeated_runs_bit_identical(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((2, 3, 6, 6)).astype(np.float32)
        w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
        grads = []
        for _ in range(2):
            wt = Tensor(w, requires_grad=True)
            out, _, _ = ops.batchnorm2d(
                ops.conv2d(Tensor(x), wt, stride=2, padding=1),
                Tensor(np.ones(4, dtype=np.float32)), Tensor(np.zeros(4, dtype=np.float32)), training=True,
            )
            backward(ops.sum(ops.tanh(out)))
            grads.append(wt.grad)
        np.testing.assert_array_equal(grads[0], grads[1])
