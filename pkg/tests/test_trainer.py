import csv

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from layersep.checkpoint import Checkpoint
from layersep.decompnet import ModelConfig
from layersep.flowbackend import ConstantFlowBackend, FlowBackend, TranslationOracle
from layersep.synthgen import SynthSpec, generate_reflection_sample, procedural_sequence
from layersep.trainer import (
    LossTrace,
    TrainConfig,
    TrainingAborted,
    build_model,
    flow_checksum,
    meta_train,
    online_finetune,
    recon_checksum,
    reptile_step,
    synthetic_stream,
    train_stage1,
    train_stage2,
)

SMALL = ModelConfig(channels=3, feature_width=4, flow_width=8, group_width=8, recon_width=8, search_range=2)
QUIET = dict(noise_sigma_range=None, jpeg_quality_range=None, vignette_kernel_range=None)
FAST = TrainConfig(lr_initial=1e-3, lr_final=1e-3, inner_lr=1e-3, online_lr=1e-3, levels=2, batch=1, seed=0)


@pytest.fixture(scope="module")
def sample():
    bg = procedural_sequence(1, 3, (48, 48), drift=(4, 0))
    rf = procedural_sequence(2, 3, (48, 48), drift=(0, 0))
    spec = SynthSpec(seed=0, crop=(16, 16), num_frames=3, motion_range=0, homography_jitter=0,
                     color_jitter=False, **QUIET)
    return generate_reflection_sample(spec, bg, rf).to_tensors()


def stage1_checkpoint(sample, iterations=2):
    return train_stage1(FAST, [sample], ConstantFlowBackend((1.0, 0.0)), model_config=SMALL, iterations=iterations)


def stage2_checkpoint(sample):
    return train_stage2(FAST, [sample], stage1_checkpoint(sample), ConstantFlowBackend(), iterations=1)


def test_defaults():
    c = TrainConfig()
    assert (c.lr_initial, c.lr_final, c.stage1_iters, c.stage2_iters) == (1e-4, 1e-5, 100_000, 100_000)
    assert (c.batch, c.levels, c.lambda_grad, c.lambda_tv, c.reptile_eps, c.online_iters) == (2, 5, 1.0, 0.1, 0.1, 200)
    assert (c.inner_steps, c.synth_ratio) == (4, 0.5)


@pytest.mark.parametrize("kw", [dict(lr_initial=0), dict(reptile_eps=0), dict(reptile_eps=1.5), dict(batch=0),
                                dict(synth_ratio=2.0), dict(online_iters=-1)])
def test_config_rejects(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_config_roundtrip():
    c = TrainConfig(seed=4, levels=3)
    assert TrainConfig.from_dict(c.to_dict()) == c


class TestReptile:
    def test_examples(self):
        z, o = torch.zeros(3), torch.ones(3)
        assert torch.allclose(reptile_step(z, o, 0.1), torch.full((3,), 0.1))
        assert torch.equal(reptile_step(z, o, 1.0), o)
        assert torch.equal(reptile_step(o * 0.3, o, 0.0), o * 0.3)

    def test_endpoints_exact_for_random_values(self):
        g = torch.Generator().manual_seed(3)
        a, b = torch.randn(100, generator=g, dtype=torch.float64), torch.randn(100, generator=g, dtype=torch.float64)
        assert torch.equal(reptile_step(a, b, 1.0), b)
        assert torch.equal(reptile_step(a, b, 0.0), a)
        assert torch.equal(reptile_step(a, b, 0.1), a + 0.1 * (b - a))

    def test_mappings_and_arrays(self):
        out = reptile_step({"a": np.zeros(2), "b": np.ones(1)}, {"a": np.ones(2), "b": np.ones(1)}, 0.5)
        assert np.array_equal(out["a"], [0.5, 0.5]) and np.array_equal(out["b"], [1.0])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            reptile_step(torch.zeros(2), torch.zeros(3), 0.1)
        with pytest.raises(ValueError, match="names"):
            reptile_step({"a": torch.zeros(1)}, {"b": torch.zeros(1)}, 0.1)

    @settings(max_examples=100, deadline=None)
    @given(
        arrays(np.float64, 16, elements=st.floats(-10, 10)),
        arrays(np.float64, 16, elements=st.floats(-10, 10)),
        st.floats(0.0, 1.0, exclude_min=True),
    )
    def test_contraction(self, theta, task, eps):
        new = reptile_step(theta, task, eps)
        before = np.linalg.norm(theta - task)
        assert abs(np.linalg.norm(new - task) - (1 - eps) * before) <= 1e-12 * max(1.0, before)


class TestStage1:
    def test_only_flow_parameters_move(self, sample):
        torch.manual_seed(0)
        ref = build_model(SMALL, FAST.seed)
        ck = stage1_checkpoint(sample, iterations=3)
        model = ck.build_model()
        assert recon_checksum(model) == recon_checksum(ref)
        assert flow_checksum(model) != flow_checksum(ref)
        assert ck.stage == "stage1" and len(ck.trace.values("dec")) == 3

    def test_deterministic_trace(self, sample):
        a = stage1_checkpoint(sample, iterations=3).trace.values("dec")
        b = stage1_checkpoint(sample, iterations=3).trace.values("dec")
        assert a == b

    def test_backend_failure_keeps_state(self, sample):
        class Broken(FlowBackend):
            name = "broken"

            def _estimate(self, src, dst):
                raise RuntimeError("weights corrupted")

        with pytest.raises(TrainingAborted) as err:
            train_stage1(FAST, [sample], Broken(), model_config=SMALL, iterations=2)
        assert err.value.checkpoint.stage == "stage1" and err.value.checkpoint.iteration == 0

    def test_zero_init_traces_without_updates(self, sample):
        cfg = ModelConfig(**{**SMALL.to_dict(), "init_mode": "zero"})
        ck = train_stage1(FAST, [sample], ConstantFlowBackend((1.0, 0.0)), model_config=cfg, iterations=2)
        assert ck.flow_checksum() == Checkpoint.from_model(build_model(cfg, FAST.seed), "init").flow_checksum()
        assert len(ck.trace.values("dec")) == 2 and ck.trace.values("dec")[0] > 0

    def test_needs_ground_truth(self, sample):
        with pytest.raises(ValueError, match="ground-truth"):
            train_stage1(FAST, [{"frames": sample["frames"]}], ConstantFlowBackend(), model_config=SMALL, iterations=1)

    def test_empty_stream(self):
        with pytest.raises(ValueError, match="empty"):
            train_stage1(FAST, [], ConstantFlowBackend(), model_config=SMALL, iterations=1)


class TestStage2:
    def test_flow_frozen_recon_moves(self, sample):
        ck1 = stage1_checkpoint(sample)
        ck2 = train_stage2(FAST, [sample], ck1, ConstantFlowBackend(), iterations=3)
        assert ck2.flow_checksum() == ck1.flow_checksum()
        assert ck2.recon_checksum() != ck1.recon_checksum()
        assert ck2.stage == "stage2" and len(ck2.trace.values("supervised")) == 3
        assert all(p.requires_grad for p in ck2.build_model().parameters())

    def test_requires_stage1(self, sample):
        with pytest.raises(ValueError, match="stage 1"):
            train_stage2(FAST, [sample], None, ConstantFlowBackend(), iterations=1)
        with pytest.raises(ValueError, match="stage1"):
            train_stage2(FAST, [sample], stage2_checkpoint(sample), ConstantFlowBackend(), iterations=1)

    def test_lambda_grad_from_config(self, sample):
        ck = train_stage2(FAST, [sample], stage1_checkpoint(sample), ConstantFlowBackend(), iterations=1)
        img, grad, sup = (ck.trace.values(n)[0] for n in ("img", "grad", "supervised"))
        assert sup == pytest.approx(img + FAST.lambda_grad * grad, rel=1e-6)


class GuardedSample(dict):
    """Records every key read; real samples must only be read for their frames."""

    def __init__(self, *a, **kw):
        super().__init__(*a, **kw)
        self.reads = set()

    def __getitem__(self, key):
        self.reads.add(key)
        return super().__getitem__(key)

    def get(self, key, default=None):
        self.reads.add(key)
        return super().get(key, default)


class TestMeta:
    def test_real_only_reads_frames(self, sample):
        ck = stage2_checkpoint(sample)
        real = [GuardedSample(frames=sample["frames"])]
        out = meta_train(FAST, None, real, ck, ConstantFlowBackend(), iterations=2)
        assert real[0].reads == {"frames"}
        assert out.flow_checksum() == ck.flow_checksum()
        assert out.recon_checksum() != ck.recon_checksum()
        assert out.stage == "meta" and out.trace.values("task_unsupervised")

    def test_zero_inner_steps_fixed_point(self, sample):
        ck = stage2_checkpoint(sample)
        cfg = TrainConfig(**{**FAST.to_dict(), "inner_steps": 0})
        out = meta_train(cfg, [sample], [{"frames": sample["frames"]}], ck, ConstantFlowBackend(), iterations=3)
        for name in ck.params:
            assert torch.equal(out.params[name], ck.params[name])

    def test_mixed_streams_flow_frozen(self, sample):
        ck = stage2_checkpoint(sample)
        out = meta_train(FAST, [sample], [{"frames": sample["frames"]}], ck, ConstantFlowBackend(), iterations=4)
        assert out.flow_checksum() == ck.flow_checksum()
        names = {n for _, n, _ in out.trace.rows}
        assert names <= {"task_supervised", "task_unsupervised"}

    def test_single_step_matches_reptile_rule(self, sample):
        ck = stage2_checkpoint(sample)
        cfg = TrainConfig(**{**FAST.to_dict(), "inner_steps": 1, "reptile_eps": 1.0})
        full = meta_train(cfg, [sample], None, ck, ConstantFlowBackend(), iterations=1)
        half = meta_train(TrainConfig(**{**cfg.to_dict(), "reptile_eps": 0.5}), [sample], None, ck,
                          ConstantFlowBackend(), iterations=1)
        for name in ck.params:
            expect = ck.params[name] + 0.5 * (full.params[name] - ck.params[name])
            assert torch.allclose(half.params[name], expect, atol=1e-7)

    def test_errors(self, sample):
        ck = stage2_checkpoint(sample)
        with pytest.raises(ValueError, match="stream"):
            meta_train(FAST, [], [], ck, ConstantFlowBackend(), iterations=1)
        with pytest.raises(ValueError, match="stage"):
            meta_train(FAST, [sample], None, stage1_checkpoint(sample), ConstantFlowBackend(), iterations=1)


class TestOnline:
    def test_frozen_flow_and_backend(self, sample):
        ck = stage2_checkpoint(sample)
        backend = TranslationOracle(max_displacement=3)
        before = backend.checksum()
        out, result = online_finetune(FAST, sample["frames"], ck, backend, iterations=3)
        assert backend.checksum() == before
        assert out.flow_checksum() == ck.flow_checksum()
        assert out.recon_checksum() != ck.recon_checksum()
        assert out.stage == "online"
        assert len(out.trace.values("unsupervised")) == 4
        assert result.background.shape == sample["frames"].shape[1:]

    def test_default_iterations(self):
        assert TrainConfig().online_iters == 200

    def test_does_not_touch_input_checkpoint(self, sample):
        ck = stage2_checkpoint(sample)
        snap = {k: v.clone() for k, v in ck.params.items()}
        online_finetune(FAST, {"frames": sample["frames"]}, ck, ConstantFlowBackend(), iterations=2)
        assert all(torch.equal(snap[k], ck.params[k]) for k in snap)


def test_loss_trace_csv(tmp_path):
    tr = LossTrace()
    tr.add(0, {"dec": 0.5})
    tr.add(1, {"dec": torch.tensor(0.25)})
    path = tr.to_csv(tmp_path / "trace.csv")
    rows = list(csv.reader(path.open()))
    assert rows == [["iteration", "loss_name", "value"], ["0", "dec", "0.5"], ["1", "dec", "0.25"]]


def test_synthetic_stream_yields_distinct_samples():
    bg = [procedural_sequence(1, 3, (40, 40))]
    rf = [procedural_sequence(2, 3, (40, 40))]
    stream = synthetic_stream(SynthSpec(crop=(16, 16), num_frames=2), bg, rf)
    a, b = next(stream), next(stream)
    assert set(a) == {"frames", "gt_b", "gt_r"}
    assert not torch.equal(a["frames"], b["frames"])
