"""
Training at toy scale
=====================

Pre-training has two stages. Stage 1 fits the flow decomposition network to
pseudo ground-truth flows. Stage 2 freezes it and fits the reconstruction
networks. Meta-training then mixes supervised synthetic tasks with
unsupervised real ones, and online optimization adapts a checkpoint to a
single test sequence. Iteration counts here are tiny; the defaults in
``TrainConfig`` are the full schedule.
"""

import tempfile
from pathlib import Path

from layersep.checkpoint import load_checkpoint, save_checkpoint
from layersep.decompnet import ModelConfig
from layersep.flowbackend import TranslationOracle
from layersep.synthgen import SynthSpec, procedural_sequence
from layersep.trainer import TrainConfig, meta_train, online_finetune, synthetic_stream, train_stage1, train_stage2

out = Path(tempfile.mkdtemp(prefix="layersep_train_"))
backend = TranslationOracle(max_displacement=4)
spec = SynthSpec(crop=(32, 32), num_frames=3, motion_range=2, homography_jitter=0)
sources = [procedural_sequence(i, 3, (48, 48)) for i in range(3)]
data = [next(synthetic_stream(spec, sources, sources, start_seed=i)) for i in range(4)]

cfg = TrainConfig(lr_initial=1e-3, lr_final=1e-3, inner_lr=1e-4, online_lr=1e-4, levels=2, batch=2)
mc = ModelConfig(feature_width=8, flow_width=16, group_width=16, recon_width=16)

ck1 = train_stage1(cfg, data, backend, model_config=mc, iterations=20)
dec = ck1.trace.values("dec")
print(f"stage 1 decomposition loss {dec[0]:.3f} -> {dec[-1]:.3f}")

ck2 = train_stage2(cfg, data, ck1, backend, iterations=20)
sup = ck2.trace.values("supervised")
print(f"stage 2 supervised loss    {sup[0]:.3f} -> {sup[-1]:.3f}")
print("flow weights untouched by stage 2:", ck1.flow_checksum() == ck2.flow_checksum())

# real sequences carry frames only, which selects the unsupervised branch
real = [{"frames": d["frames"]} for d in data[:2]]
meta = meta_train(cfg, data, real, ck2, backend, iterations=4)
path = save_checkpoint(meta, out / "meta.ckpt")
print("meta checkpoint:", path, "stage", load_checkpoint(path).stage)

adapted, result = online_finetune(cfg, data[0]["frames"], meta, backend, iterations=20)
u = adapted.trace.values("unsupervised")
print(f"online unsupervised loss   {u[0]:.3f} -> {u[-1]:.3f}")
