"""Training procedures: two-stage pre-training, Reptile meta-training, online optimization.

Samples are dicts of ``(T, C, H, W)`` tensors. ``"frames"`` is always
present; synthetic samples also carry ``"gt_b"`` plus ``"gt_r"`` (reflection)
or ``"gt_a"`` (alpha matte). Whether a sample has ground truth decides between
the supervised and the unsupervised loss.
"""

from __future__ import annotations

import copy
import csv
from collections.abc import Mapping, Sequence
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch

from layersep.checkpoint import Checkpoint, param_checksum
from layersep.decompnet import DecompositionModel, ModelConfig, forward_decompose, initial_flow_decomposition
from layersep.flowbackend import FlowBackend, pseudo_gt_layer_flows
from layersep.objectives import decomposition_loss, supervised_loss, unsupervised_loss
from layersep.synthgen import generate_obstruction_sample, generate_reflection_sample, with_seed
from layersep.tensorgrid import build_pyramid

__all__ = [
    "TrainConfig",
    "LossTrace",
    "TrainingAborted",
    "build_model",
    "train_stage1",
    "train_stage2",
    "reptile_step",
    "meta_train",
    "online_finetune",
    "synthetic_stream",
    "flow_checksum",
    "recon_checksum",
]


@dataclass(frozen=True)
class TrainConfig:
    lr_initial: float = 1e-4
    lr_final: float = 1e-5
    stage1_iters: int = 100_000
    stage2_iters: int = 100_000
    batch: int = 2
    levels: int = 5
    lambda_grad: float = 1.0
    lambda_tv: float = 0.1
    reptile_eps: float = 0.1
    meta_iters: int = 100_000
    inner_steps: int = 4
    inner_lr: float = 1e-5
    synth_ratio: float = 0.5
    online_iters: int = 200
    online_lr: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        for name in ("lr_initial", "lr_final", "inner_lr", "online_lr", "lambda_grad", "lambda_tv"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("stage1_iters", "stage2_iters", "meta_iters", "online_iters", "inner_steps"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative, got {getattr(self, name)}")
        if self.batch < 1 or self.levels < 1:
            raise ValueError("batch and levels must be at least 1")
        if not 0 < self.reptile_eps <= 1:
            raise ValueError(f"reptile_eps must lie in (0, 1], got {self.reptile_eps}")
        if not 0 <= self.synth_ratio <= 1:
            raise ValueError(f"synth_ratio must lie in [0, 1], got {self.synth_ratio}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


class LossTrace:
    """Per-iteration loss values, written as CSV rows ``iteration,loss_name,value``."""

    def __init__(self):
        self.rows = []

    def add(self, iteration, values: Mapping):
        for name, value in values.items():
            self.rows.append((int(iteration), name, float(value)))

    def values(self, name):
        return [v for _, n, v in self.rows if n == name]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "loss_name", "value"])
            for it, name, value in self.rows:
                w.writerow([it, name, repr(value)])
        return Path(path)

    def __len__(self):
        return len(self.rows)


class TrainingAborted(RuntimeError):
    """Raised when a run fails part-way; ``checkpoint`` holds the last consistent state."""

    def __init__(self, message, checkpoint):
        super().__init__(message)
        self.checkpoint = checkpoint


def build_model(model_config: ModelConfig | None = None, seed=0) -> DecompositionModel:
    torch.manual_seed(seed)
    return DecompositionModel(model_config or ModelConfig())


def flow_checksum(model: DecompositionModel) -> str:
    return param_checksum({n: p for n, p in model.flow_decomp.named_parameters()})


def recon_checksum(model: DecompositionModel) -> str:
    return param_checksum({f"{k}.{n}": p for k, m in model.recon_modules().items() for n, p in m.named_parameters()})


def _batches(stream, batch, name="data stream"):
    """Yield lists of ``batch`` samples; sequences are cycled, iterators are consumed."""
    if isinstance(stream, Sequence):
        if len(stream) == 0:
            raise ValueError(f"empty {name}")
        i = 0
        while True:
            yield [stream[(i + n) % len(stream)] for n in range(batch)]
            i += batch
    it = iter(stream)
    first = True
    while True:
        items = []
        for _ in range(batch):
            try:
                items.append(next(it))
            except StopIteration:
                if first and not items:
                    raise ValueError(f"empty {name}") from None
                raise ValueError(f"{name} exhausted") from None
        first = False
        yield items


def _has_gt(sample):
    return "gt_b" in sample


def _gt_obstruction(sample):
    return sample["gt_a"] if "gt_a" in sample else sample["gt_r"]


def _dtype_of(model):
    return next(model.parameters()).dtype


def _adam(params, lr):
    return torch.optim.Adam(params, lr=lr)


def _set_requires_grad(params, flag):
    for p in params:
        p.requires_grad_(flag)


def train_stage1(config: TrainConfig, data_stream, backend: FlowBackend, model_config=None, model=None,
                 iterations=None) -> Checkpoint:
    """Fit the flow decomposition network to pseudo ground-truth layer flows.

    Only the flow decomposition parameters receive updates.
    """
    if backend is None:
        raise ValueError("stage 1 needs a flow backend for the pseudo ground truth")
    model = model or build_model(model_config, config.seed)
    torch.manual_seed(config.seed)
    obstruction = model.config.mode == "obstruction"
    flow_params = model.flow_parameters()
    _set_requires_grad(model.recon_parameters(), False)
    _set_requires_grad(flow_params, True)
    opt = _adam(flow_params, config.lr_initial)
    trace = LossTrace()
    n = config.stage1_iters if iterations is None else iterations
    dtype = _dtype_of(model)
    batches = _batches(data_stream, config.batch)
    # a fixed sample list is revisited, so its pseudo ground truth is computed once
    cache = {} if isinstance(data_stream, Sequence) else None
    it = 0

    def snapshot():
        return Checkpoint.from_model(model, "stage1", config.seed, it, config.to_dict(), opt.state_dict(), trace)

    try:
        for it in range(n):
            losses = []
            for sample in next(batches):
                if not _has_gt(sample):
                    raise ValueError("stage 1 needs samples with ground-truth layers")
                frames = sample["frames"].to(dtype)
                target = None if cache is None else cache.get(id(sample))
                if target is None:
                    gt_r = None if obstruction else sample["gt_r"].to(dtype)
                    target = pseudo_gt_layer_flows(backend, sample["gt_b"].to(dtype), gt_r, config.levels)
                    if cache is not None:
                        cache[id(sample)] = target
                coarse = build_pyramid(frames, config.levels)[0]
                vb, vr = initial_flow_decomposition(model, coarse)
                pred = {"B": vb} if obstruction else {"B": vb, "R": vr}
                losses.append(decomposition_loss(pred, target))
            loss = torch.stack(losses).mean()
            # the zero-flow ablation has nothing to fit; its loss is still traced
            if loss.requires_grad:
                opt.zero_grad()
                loss.backward()
                opt.step()
            trace.add(it, {"dec": loss.detach()})
        it = n
    except ValueError:
        raise
    except Exception as err:
        raise TrainingAborted(f"stage 1 aborted at iteration {it}: {err}", snapshot()) from err
    finally:
        _set_requires_grad(model.parameters(), True)
    return snapshot()


def _supervised_step(model, sample, config, backend, dtype):
    frames = sample["frames"].to(dtype)
    result = forward_decompose(model, frames, levels=config.levels, backend=backend)
    gb = build_pyramid(sample["gt_b"].to(dtype), config.levels)
    go = build_pyramid(_gt_obstruction(sample).to(dtype), config.levels)
    return supervised_loss(result, gb, go, config.lambda_grad)


def _unsupervised_step(model, sample, config, backend, dtype):
    frames = sample["frames"].to(dtype)
    result = forward_decompose(model, frames, levels=config.levels, backend=backend)
    pyr = build_pyramid(frames, config.levels)
    return unsupervised_loss(result, pyr, config.lambda_tv, backend=backend), result


def train_stage2(config: TrainConfig, data_stream, checkpoint: Checkpoint, backend: FlowBackend,
                 iterations=None, model=None) -> Checkpoint:
    """Fit both reconstruction networks with the supervised loss; the flow network stays fixed."""
    if checkpoint is None:
        raise ValueError("stage 2 needs a stage 1 checkpoint")
    checkpoint.require_stage("stage1")
    if backend is None:
        raise ValueError("stage 2 needs a flow backend")
    model = model or checkpoint.build_model()
    torch.manual_seed(config.seed)
    _set_requires_grad(model.flow_parameters(), False)
    opt = _adam(model.recon_parameters(), config.lr_final)
    trace = LossTrace()
    n = config.stage2_iters if iterations is None else iterations
    dtype = _dtype_of(model)
    batches = _batches(data_stream, config.batch)
    try:
        for it in range(n):
            reports = []
            for sample in next(batches):
                if not _has_gt(sample):
                    raise ValueError("stage 2 needs samples with ground-truth layers")
                reports.append(_supervised_step(model, sample, config, backend, dtype))
            loss = torch.stack([r.supervised for r in reports]).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
            trace.add(it, {
                "supervised": loss.detach(),
                "img": torch.stack([r.img.detach() for r in reports]).mean(),
                "grad": torch.stack([r.grad.detach() for r in reports]).mean(),
            })
    finally:
        _set_requires_grad(model.flow_parameters(), True)
    return Checkpoint.from_model(model, "stage2", config.seed, n, config.to_dict(), opt.state_dict(), trace)


def reptile_step(outer, task, eps):
    """``outer + eps * (task - outer)`` for tensors, arrays, or name -> value mappings."""
    if isinstance(outer, Mapping):
        if set(outer) != set(task):
            raise ValueError(f"parameter names differ: {sorted(set(outer) ^ set(task))}")
        return {k: reptile_step(outer[k], task[k], eps) for k in outer}
    if tuple(outer.shape) != tuple(task.shape):
        raise ValueError(f"shape mismatch: {tuple(outer.shape)} vs {tuple(task.shape)}")
    # two-sided form keeps eps = 0 and eps = 1 exact in floating point
    if eps < 0.5:
        return outer + eps * (task - outer)
    return task - (1 - eps) * (task - outer)


def _recon_state(model):
    return {f"{k}.{n}": p.detach().clone() for k, m in model.recon_modules().items() for n, p in m.named_parameters()}


def _assign_recon(model, state):
    with torch.no_grad():
        for k, m in model.recon_modules().items():
            for n, p in m.named_parameters():
                p.copy_(state[f"{k}.{n}"])


def meta_train(config: TrainConfig, synth_stream, real_stream, checkpoint: Checkpoint, backend: FlowBackend,
               iterations=None) -> Checkpoint:
    """Reptile over reconstruction parameters, mixing supervised and unsupervised tasks.

    Each outer iteration draws a batch from the synthetic stream with
    probability ``synth_ratio`` (else the real stream), adapts a copy of the
    reconstruction parameters for ``inner_steps`` Adam steps, and moves the
    outer parameters a fraction ``reptile_eps`` toward the adapted copy.
    """
    if checkpoint is None:
        raise ValueError("meta-training needs a pre-trained checkpoint")
    checkpoint.require_stage("stage2", "meta")
    if backend is None:
        raise ValueError("meta-training needs a flow backend")
    has_synth = synth_stream is not None and not (isinstance(synth_stream, Sequence) and len(synth_stream) == 0)
    has_real = real_stream is not None and not (isinstance(real_stream, Sequence) and len(real_stream) == 0)
    if not (has_synth or has_real):
        raise ValueError("meta-training needs at least one non-empty stream")
    model = checkpoint.build_model()
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    _set_requires_grad(model.flow_parameters(), False)
    synth = _batches(synth_stream, config.batch, "synthetic stream") if has_synth else None
    real = _batches(real_stream, config.batch, "real stream") if has_real else None
    trace = LossTrace()
    dtype = _dtype_of(model)
    n = config.meta_iters if iterations is None else iterations
    try:
        for it in range(n):
            use_synth = has_synth and (not has_real or rng.random() < config.synth_ratio)
            batch = next(synth if use_synth else real)
            outer = _recon_state(model)
            opt = _adam(model.recon_parameters(), config.inner_lr)
            for _ in range(config.inner_steps):
                losses = []
                for sample in batch:
                    if _has_gt(sample):
                        rep = _supervised_step(model, sample, config, backend, dtype)
                        losses.append(rep.supervised)
                    else:
                        rep, _ = _unsupervised_step(model, sample, config, backend, dtype)
                        losses.append(rep.unsupervised)
                loss = torch.stack(losses).mean()
                opt.zero_grad()
                loss.backward()
                opt.step()
                trace.add(it, {"task_supervised" if use_synth else "task_unsupervised": loss.detach()})
            _assign_recon(model, reptile_step(outer, _recon_state(model), config.reptile_eps))
    finally:
        _set_requires_grad(model.flow_parameters(), True)
    return Checkpoint.from_model(model, "meta", config.seed, checkpoint.iteration + n, config.to_dict(), None, trace)


def online_finetune(config: TrainConfig, sequence, checkpoint: Checkpoint, backend: FlowBackend,
                    keyframe=None, iterations=None):
    """Adapt the reconstruction networks to one test sequence with the unsupervised loss.

    The optimizer starts from fresh moments. Returns the adapted checkpoint and
    the decomposition produced by the adapted model.
    """
    if checkpoint is None:
        raise ValueError("online optimization needs a checkpoint")
    if backend is None:
        raise ValueError("online optimization needs a flow backend")
    frames = sequence["frames"] if isinstance(sequence, Mapping) else sequence
    model = checkpoint.build_model()
    torch.manual_seed(config.seed)
    dtype = _dtype_of(model)
    frames = frames.to(dtype)
    _set_requires_grad(model.flow_parameters(), False)
    opt = _adam(model.recon_parameters(), config.online_lr)
    trace = LossTrace()
    pyr = build_pyramid(frames, config.levels)
    n = config.online_iters if iterations is None else iterations
    try:
        for it in range(n):
            result = forward_decompose(model, frames, keyframe, config.levels, backend)
            rep = unsupervised_loss(result, pyr, config.lambda_tv, backend=backend)
            opt.zero_grad()
            rep.unsupervised.backward()
            opt.step()
            trace.add(it, {"unsupervised": rep.unsupervised.detach(), "warp": rep.warp.detach(), "tv": rep.tv.detach()})
        with torch.no_grad():
            result = forward_decompose(model, frames, keyframe, config.levels, backend)
            rep = unsupervised_loss(result, pyr, config.lambda_tv, backend=backend)
        trace.add(n, {"unsupervised": rep.unsupervised, "warp": rep.warp, "tv": rep.tv})
    finally:
        _set_requires_grad(model.flow_parameters(), True)
    ckpt = Checkpoint.from_model(model, "online", config.seed, n, config.to_dict(), opt.state_dict(), trace)
    return ckpt, result


def synthetic_stream(spec, background_sources, layer_sources, start_seed=0, dtype=None):
    """Endless stream of synthetic samples with consecutive seeds.

    ``background_sources`` and ``layer_sources`` are lists of frame sequences.
    For the reflection task each layer source is a reflection sequence; for
    fence/raindrop it is an ``(obstruction, alpha)`` pair.
    """
    if not background_sources or not layer_sources:
        raise ValueError("synthetic stream needs non-empty source lists")
    seed = start_seed
    while True:
        s = with_seed(spec, seed)
        rng = np.random.default_rng(seed)
        bg = background_sources[int(rng.integers(len(background_sources)))]
        layer = layer_sources[int(rng.integers(len(layer_sources)))]
        if spec.task == "reflection":
            sample = generate_reflection_sample(s, bg, layer)
        else:
            sample = generate_obstruction_sample(s, bg, *layer)
        yield sample.to_tensors(dtype)
        seed += 1


def clone_model(model):
    return copy.deepcopy(model)
