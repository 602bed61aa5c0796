"""
Tests for the BNS loss, the generator and batch distillation.
"""

import numpy as np
import pytest
from pathlib import Path
import sys

sys.path.insert(0, str(Path(__file__).parent.parent))

from src.config import reset_settings
from src.distill import (
    DistillConfig,
    DistilledDataset,
    DistillMode,
    Generator,
    GeneratorConfig,
    baseline_distill_direct,
    baseline_distill_generator_only,
    bns_loss,
    distill_batch,
    distill_batch_with_trace,
    distill_dataset,
    generate,
    init_distill_state,
)
from src.distill.distiller import distill_step
from src.engine import Tensor, backward, no_grad, ops
from src.errors import ConfigError, NumericError, ShapeError
from src.nn.models import TapRequest, build_model, forward_with_taps, load_arch


SMALL_GEN = GeneratorConfig(latent_dim=8, base_channels=4)


def small_cfg(mode=DistillMode.GENIE, swing=True, **kw):
    return DistillConfig(mode=mode, swing=swing, generator=SMALL_GEN, **kw)


def stats(*pairs):
    return [(Tensor(np.asarray(m, dtype=np.float64)), Tensor(np.asarray(s, dtype=np.float64))) for m, s in pairs]


class TestBnsLoss:
    
    def test_matching_stats_give_zero(self):
        taps = stats(([1.0, 2.0], [0.5, 1.5]), ([0.0], [1.0]))
        running = [(np.array([1.0, 2.0]), np.array([0.5, 1.5])), (np.array([0.0]), np.array([1.0]))]
        assert bns_loss(taps, running).item() == 0.0
    
    def test_worked_example(self):
        taps = stats(([1.0, 0.0], [1.0, 1.0]))
        running = [(np.array([0.0, 0.0]), np.array([1.0, 3.0]))]
        assert bns_loss(taps, running).item() == pytest.approx(5.0)
    
    def test_resummation_oracle(self):
        rng = np.random.default_rng(0)
        pairs = [(rng.standard_normal(c), rng.uniform(0.5, 2, c)) for c in (3, 5, 2)]
        running = [(rng.standard_normal(c), rng.uniform(0.5, 2, c)) for c in (3, 5, 2)]
        expected = sum(
            float(np.sum((m - rm) ** 2) + np.sum((s - rs) ** 2))
            for (m, s), (rm, rs) in zip(pairs, running)
        )
        assert bns_loss(stats(*pairs), running).item() == pytest.approx(expected, abs=1e-9)
    
    def test_permutation_invariant(self):
        rng = np.random.default_rng(1)
        pairs = [(rng.standard_normal(4), rng.uniform(0.5, 2, 4)) for _ in range(3)]
        running = [(rng.standard_normal(4), rng.uniform(0.5, 2, 4)) for _ in range(3)]
        order = [2, 0, 1]
        forward = bns_loss(stats(*pairs), running).item()
        permuted = bns_loss(stats(*[pairs[i] for i in order]), [running[i] for i in order]).item()
        assert forward == pytest.approx(permuted, abs=1e-12)
    
    def test_layer_count_mismatch(self):
        with pytest.raises(ShapeError):
            bns_loss(stats(([0.0], [1.0])), [])
    
    def test_zero_when_running_stats_match_batch(self, tiny_model):
        x = Tensor(np.random.default_rng(2).standard_normal((6, 3, 8, 8)).astype(np.float32))
        with no_grad():
            _, record = forward_with_taps(tiny_model, x, TapRequest(bn_stats=True))
        for bn, (mu, sigma) in zip(tiny_model.bn_layers(), record.bn_stats):
            bn.running_mean = mu.data.copy()
            bn.running_var = (sigma.data.astype(np.float64) ** 2 - bn.eps).astype(np.float32)
        with no_grad():
            _, record = forward_with_taps(tiny_model, x, TapRequest(bn_stats=True))
        assert bns_loss(record, tiny_model.bn_running_stats()).item() < 1e-6


class TestGenerator:
    
    def test_default_output_shape(self):
        gen = Generator(rng=np.random.default_rng(0))
        z = Tensor(np.random.default_rng(1).standard_normal((2, 256)).astype(np.float32))
        with no_grad():
            assert generate(gen, z).shape == (2, 3, 32, 32)
    
    def test_rows_differ(self):
        gen = Generator(SMALL_GEN, np.random.default_rng(0))
        z = Tensor(np.random.default_rng(1).standard_normal((4, 8)).astype(np.float32))
        with no_grad():
            images = generate(gen, z).data
        assert not np.allclose(images[0], images[1])
    
    def test_latent_dim_checked(self):
        gen = Generator(SMALL_GEN, np.random.default_rng(0))
        with pytest.raises(ShapeError):
            generate(gen, Tensor(np.zeros((2, 9))))
    
    def test_latent_gradient_matches_finite_differences(self):
        gen = Generator(SMALL_GEN.model_copy(update={"out_size": 8}), np.random.default_rng(0))
        for p in gen.parameters():
            p.data = p.data.astype(np.float64)
        z0 = np.random.default_rng(3).standard_normal((3, 8))
        r = np.random.default_rng(4).standard_normal((3, 3, 8, 8))

        def objective(z):
            return ops.sum(ops.mul(generate(gen, z), Tensor(r)))

        z = Tensor(z0, requires_grad=True)
        backward(objective(z))
        h = 1e-6
        for idx in [(0, 0), (1, 3), (2, 7)]:
            plus, minus = z0.copy(), z0.copy()
            plus[idx] += h
            minus[idx] -= h
            with no_grad():
                numeric = (objective(Tensor(plus)).item() - objective(Tensor(minus)).item()) / (2 * h)
            assert z.grad[idx] == pytest.approx(numeric, rel=1e-3, abs=1e-6)


class TestDistillBatch:
    
    def test_zero_iterations_returns_initial_images(self, tiny_model):
        cfg = small_cfg()
        result = distill_batch_with_trace(tiny_model, 4, 0, seed=5, cfg=cfg)
        state = init_distill_state(tiny_model, 4, 0, 5, cfg)
        with no_grad():
            np.testing.assert_array_equal(result.images, state.images().data)
        assert result.trace == []
    
    def test_zeroq_zero_iterations_is_noise(self, tiny_model):
        images = distill_batch(tiny_model, 16, 0, seed=0, cfg=small_cfg(DistillMode.ZEROQ)).data
        assert images.shape == (16, 3, 8, 8)
        assert abs(float(images.std()) - 1.0) < 0.1
    
    @pytest.mark.parametrize("mode", list(DistillMode))
    def test_deterministic(self, tiny_model, mode):
        a = distill_batch_with_trace(tiny_model, 4, 5, seed=1, cfg=small_cfg(mode))
        b = distill_batch_with_trace(tiny_model, 4, 5, seed=1, cfg=small_cfg(mode))
        np.testing.assert_array_equal(a.images, b.images)
        assert a.trace == b.trace
        assert len(a.trace) == 5
    
    def test_seed_changes_output(self, tiny_model):
        a = distill_batch(tiny_model, 4, 2, seed=1, cfg=small_cfg())
        b = distill_batch(tiny_model, 4, 2, seed=2, cfg=small_cfg())
        assert not np.array_equal(a.data, b.data)
    
    def test_model_left_untouched(self, tiny_model):
        before = {k: v.copy() for k, v in tiny_model.state_dict().items()}
        distill_batch(tiny_model, 4, 3, seed=0, cfg=small_cfg())
        for key, value in tiny_model.state_dict().items():
            np.testing.assert_array_equal(value, before[key])
    
    def test_generator_only_does_not_learn_latents(self, tiny_model):
        state = init_distill_state(tiny_model, 4, 3, 0, small_cfg(DistillMode.GBA))
        assert state.opt_z is None
        first_z = state.z.data.copy()
        distill_step(tiny_model, state)
        assert state.z.grad is None
        assert not np.array_equal(state.z.data, first_z)
    
    def test_genie_learns_latents(self, tiny_model):
        state = init_distill_state(tiny_model, 4, 3, 0, small_cfg(DistillMode.GENIE))
        first_z = state.z.data.copy()
        distill_step(tiny_model, state)
        assert state.z.grad is not None
        assert not np.array_equal(state.z.data, first_z)
    
    def test_zeroq_loss_decreases(self, tiny_model):
        result = distill_batch_with_trace(tiny_model, 8, 30, seed=0, cfg=small_cfg(DistillMode.ZEROQ, swing=False))
        assert result.final_loss < result.initial_loss
    
    def test_genie_loss_decreases(self, tiny_model):
        result = distill_batch_with_trace(tiny_model, 8, 30, seed=0, cfg=small_cfg(DistillMode.GENIE))
        assert result.final_loss < result.initial_loss
    
    def test_non_finite_loss_reports_step(self, tiny_model):
        tiny_model.bn_layers()[0].running_mean[:] = np.nan
        with pytest.raises(NumericError) as info:
            distill_batch(tiny_model, 4, 3, seed=0, cfg=small_cfg())
        assert info.value.step == 0


class TestDistillDataset:
    
    def test_counts_and_traces(self, tiny_model):
        data = distill_dataset(tiny_model, 8, batch_size=4, iters=3, base_seed=0, cfg=small_cfg())
        assert data.images.shape == (8, 3, 8, 8)
        assert len(data.traces) == 2
        assert len(list(data.trace_rows())) == 2 * 3
        assert data.metadata["batches"] == [0, 1]
    
    def test_batches_independent(self, tiny_model):
        full = distill_dataset(tiny_model, 8, batch_size=4, iters=3, base_seed=9, cfg=small_cfg())
        only_second = distill_dataset(tiny_model, 8, batch_size=4, iters=3, base_seed=9, cfg=small_cfg(), batches=[1])
        np.testing.assert_array_equal(only_second.images, full.images[4:])
    
    def test_batch_seed_is_base_xor_index(self, tiny_model):
        data = distill_dataset(tiny_model, 8, batch_size=4, iters=2, base_seed=6, cfg=small_cfg())
        single = distill_batch(tiny_model, 4, 2, seed=6 ^ 1, cfg=small_cfg())
        np.testing.assert_array_equal(data.images[4:], single.data)
    
    def test_thread_count_does_not_matter(self, tiny_model, monkeypatch):
        serial = distill_dataset(tiny_model, 12, batch_size=4, iters=2, base_seed=0, cfg=small_cfg())
        monkeypatch.setenv("GENIE_THREADS", "3")
        reset_settings()
        threaded = distill_dataset(tiny_model, 12, batch_size=4, iters=2, base_seed=0, cfg=small_cfg())
        np.testing.assert_array_equal(serial.images, threaded.images)
        assert serial.traces == threaded.traces
    
    def test_num_images_must_divide(self, tiny_model):
        with pytest.raises(ConfigError):
            distill_dataset(tiny_model, 10, batch_size=4, iters=1, cfg=small_cfg())
    
    def test_failed_batch_is_named(self, tiny_model):
        tiny_model.bn_layers()[0].running_mean[:] = np.nan
        with pytest.raises(NumericError) as info:
            distill_dataset(tiny_model, 4, batch_size=4, iters=2, cfg=small_cfg())
        assert info.value.batch == 0
        assert info.value.step == 0
    
    def test_save_and_load(self, tmp_path, tiny_model):
        data = distill_dataset(tiny_model, 4, batch_size=4, iters=2, base_seed=3, cfg=small_cfg())
        path = data.save(tmp_path / "d.genz")
        loaded = DistilledDataset.load(path)
        np.testing.assert_array_equal(loaded.images, data.images)
        assert loaded.traces == data.traces
        assert loaded.metadata["seed"] == 3
        assert loaded.metadata["mode"] == "genie"
    
    def test_baselines(self, tiny_model):
        direct = baseline_distill_direct(tiny_model, 4, iters=2)
        gen_only = baseline_distill_generator_only(tiny_model, 4, iters=1)
        assert direct.metadata["mode"] == "zeroq"
        assert gen_only.metadata["mode"] == "gba"
        assert direct.images.shape == gen_only.images.shape == (4, 3, 8, 8)


@pytest.fixture(scope="module")
def desk_model():
    from src.nn.data import make_desk_dataset
    from src.nn.training import TrainConfig, pretrain
    
    return pretrain(build_model(load_arch("resnet_tiny")), make_desk_dataset(2000, seed=1234), TrainConfig())


@pytest.mark.slow
class TestDistillGate:
    """Convergence comparison on the pretrained desk model (batch 32, T=500, seed 0)."""
    
    SEPARATION = 1.2
    CONVERGENCE = 0.1
    
    @pytest.fixture(scope="class")
    def results(self, desk_model):
        runs = {}
        for mode in (DistillMode.ZEROQ, DistillMode.GENIE, DistillMode.GBA):
            cfg = DistillConfig(mode=mode, swing=mode is DistillMode.GENIE)
            runs[mode] = distill_batch_with_trace(desk_model, 32, 500, seed=0, cfg=cfg)
        return runs
    
    def test_direct_pixels_reach_lowest_loss(self, results):
        direct = results[DistillMode.ZEROQ].final_loss
        genie = results[DistillMode.GENIE].final_loss
        assert direct * self.SEPARATION <= genie
    
    def test_learned_latents_beat_generator_only(self, results):
        genie = results[DistillMode.GENIE].final_loss
        gen_only = results[DistillMode.GBA].final_loss
        assert genie * self.SEPARATION <= gen_only
    
    def test_learned_latents_converge(self, results):
        run = results[DistillMode.GENIE]
        assert run.final_loss <= self.CONVERGENCE * run.initial_loss
    
    def test_direct_pixels_decrease_from_the_start(self, results):
        head = results[DistillMode.ZEROQ].trace[:11]
        assert all(b < a for a, b in zip(head, head[1:]))
