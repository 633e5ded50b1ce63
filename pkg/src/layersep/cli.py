"""Command-line entry point.

Subcommands: synth, pretrain, metatrain, remove, eval, baselines. Options come
from flags, from an optional ``--config`` file (INI with one section per
subcommand, or the ``manifest.json`` of an earlier run), and from built-in
defaults, in that order of precedence. Every command writes its outputs into a
staging directory that is moved into place only on success, together with a
``manifest.json`` recording the effective configuration.
"""

from __future__ import annotations

import argparse
import configparser
import json
import os
import shutil
import sys
import tempfile
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from layersep import __version__
from layersep.checkpoint import load_checkpoint, save_checkpoint
from layersep.decompnet import FUSIONS, INIT_MODES, MODES, DecompositionModel, ModelConfig, forward_decompose
from layersep.flowbackend import (
    WEIGHTS_ENV,
    FarnebackBackend,
    TorchScriptBackend,
    TranslationOracle,
    pairwise_flows,
)
from layersep.flowio import write_flo
from layersep.metrics import metrics
from layersep.synthgen import (
    TASKS,
    SynthSpec,
    generate_obstruction_sample,
    generate_reflection_sample,
    load_sample_dir,
    procedural_fence,
    procedural_sequence,
    read_frames_dir,
    read_image,
    write_image,
    write_sample,
)
from layersep.trainer import TrainConfig, build_model, meta_train, online_finetune, train_stage1, train_stage2

BACKENDS = ("auto", "farneback", "oracle", "pretrained")


class CommandError(Exception):
    pass


@dataclass(frozen=True)
class Opt:
    name: str
    type: object
    default: object = None
    help: str = ""
    choices: tuple | None = None
    required: bool = False


def _bool(v):
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _size(v):
    if isinstance(v, (list, tuple)):
        return tuple(int(x) for x in v)
    w, h = str(v).lower().split("x")
    return int(w), int(h)


def _optional_int(v):
    if v is None or str(v).strip().lower() in ("", "none", "random"):
        return None
    return int(v)


_MODEL = [
    Opt("mode", str, "reflection", "layer model", MODES),
    Opt("init_mode", str, "uniform", "initial flow decomposition variant", INIT_MODES),
    Opt("width", int, 32, "channel width of the flow and reconstruction networks"),
    Opt("levels", int, 5, "pyramid levels above the coarsest"),
    Opt("backend", str, "auto", "flow estimator for refinement and pseudo ground truth", BACKENDS),
    Opt("seed", int, 0, "random seed"),
]

OPTIONS = {
    "synth": [
        Opt("out", str, None, "output directory", required=True),
        Opt("seed", int, 0, "seed of the first sample"),
        Opt("count", int, 1, "number of samples"),
        Opt("task", str, "reflection", "what to synthesise", TASKS),
        Opt("frames", _optional_int, None, "frames per sample (default: random in [2, 7])"),
        Opt("crop", _size, (320, 192), "crop size WxH"),
        Opt("motion_range", int, 40, "largest crop step between frames"),
        Opt("color_jitter", _bool, True, "random colour augmentation"),
        Opt("corrupt", _bool, True, "vignette, noise and JPEG on the composites"),
        Opt("background", str, None, "frame directory, or directory of frame directories"),
        Opt("layer", str, None, "reflection sources, or obstruction image for fence/raindrop"),
        Opt("alpha", str, None, "alpha matte image for fence/raindrop"),
    ],
    "pretrain": [
        Opt("data", str, None, "directory of synthetic sample directories", required=True),
        Opt("out", str, None, "output directory", required=True),
        Opt("stage1_iters", int, 100_000, "stage 1 iterations"),
        Opt("stage2_iters", int, 100_000, "stage 2 iterations"),
        Opt("batch", int, 2, "sequences per iteration"),
        Opt("lr_initial", float, 1e-4, "stage 1 learning rate"),
        Opt("lr_final", float, 1e-5, "stage 2 learning rate"),
        Opt("lambda_grad", float, 1.0, "gradient term weight"),
    ] + _MODEL,
    "metatrain": [
        Opt("checkpoint", str, None, "pre-trained checkpoint", required=True),
        Opt("out", str, None, "output directory", required=True),
        Opt("synth", str, None, "directory of synthetic sample directories"),
        Opt("real", str, None, "directory of real frame directories"),
        Opt("iters", int, 100_000, "outer iterations"),
        Opt("inner_steps", int, 4, "inner optimisation steps per task"),
        Opt("inner_lr", float, 1e-5, "inner learning rate"),
        Opt("eps", float, 0.1, "meta step size"),
        Opt("synth_ratio", float, 0.5, "probability of drawing a synthetic task"),
        Opt("batch", int, 2, "sequences per task"),
        Opt("levels", int, 5, "pyramid levels above the coarsest"),
        Opt("backend", str, "auto", "flow estimator", BACKENDS),
        Opt("seed", int, 0, "random seed"),
    ],
    "remove": [
        Opt("frames", str, None, "directory of input frames", required=True),
        Opt("out", str, None, "output directory (default: <frames>_layers)"),
        Opt("checkpoint", str, None, "trained checkpoint (default: untrained model)"),
        Opt("keyframe", _optional_int, None, "keyframe index (default: middle frame)"),
        Opt("online", _bool, False, "adapt to the sequence before decomposing"),
        Opt("online_iters", int, 200, "online optimisation iterations"),
        Opt("online_lr", float, 1e-5, "online learning rate"),
    ] + _MODEL,
    "eval": [
        Opt("pred", str, None, "predicted image or directory", required=True),
        Opt("gt", str, None, "ground-truth image or directory", required=True),
        Opt("out", str, None, "output directory", required=True),
        Opt("layer", str, "background", "layer name used in the report"),
        Opt("sequence", str, None, "sequence name used in the report (default: prediction name)"),
    ],
    "baselines": [
        Opt("frames", str, None, "directory of input frames", required=True),
        Opt("out", str, None, "output directory", required=True),
        Opt("checkpoint", str, None, "checkpoint providing the initial flows"),
        Opt("keyframe", _optional_int, None, "keyframe index (default: middle frame)"),
        Opt("method", str, "both", "temporal fusion", ("mean", "median", "both")),
    ] + _MODEL,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="layersep", description="Layer separation for obstructed image sequences.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command")
    for cmd, opts in OPTIONS.items():
        p = sub.add_parser(cmd, help=f"{cmd} subcommand")
        p.add_argument("--config", help="INI file with a [%s] section, or a manifest.json from an earlier run" % cmd)
        for o in opts:
            flag = "--" + o.name.replace("_", "-")
            kw = {"dest": o.name, "default": None, "help": f"{o.help} (default: {o.default})"}
            if o.type is _bool:
                p.add_argument(flag, type=_bool, nargs="?", const=True, metavar="BOOL", **kw)
            else:
                p.add_argument(flag, type=o.type, choices=o.choices, **kw)
    return parser


def _file_values(path, command):
    path = Path(path)
    if not path.is_file():
        raise CommandError(f"config file not found: {path}")
    if path.suffix.lower() == ".json":
        data = json.loads(path.read_text())
        return dict(data.get("config", data))
    cp = configparser.ConfigParser()
    cp.read(path)
    if cp.has_section(command):
        return dict(cp.items(command))
    return dict(cp.defaults())


def effective_config(command, args):
    """Defaults, then config-file values, then explicit flags."""
    opts = {o.name: o for o in OPTIONS[command]}
    cfg = {name: o.default for name, o in opts.items()}
    if args.config:
        for key, raw in _file_values(args.config, command).items():
            key = key.replace("-", "_")
            if key not in opts:
                continue
            o = opts[key]
            try:
                val = None if raw is None else o.type(raw)
            except (TypeError, ValueError) as err:
                raise CommandError(f"config value {key} = {raw!r}: {err}") from err
            if o.choices and val not in o.choices:
                raise CommandError(f"config value {key} must be one of {o.choices}, got {val!r}")
            cfg[key] = val
    for name in opts:
        val = getattr(args, name)
        if val is not None:
            cfg[name] = val
    missing = [n for n, o in opts.items() if o.required and cfg[n] is None]
    if missing:
        raise CommandError("missing required option(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))
    return cfg


def _jsonable(cfg):
    # the output location is not part of the recipe, so reruns elsewhere match byte for byte
    return {k: list(v) if isinstance(v, tuple) else v for k, v in cfg.items() if k != "out"}


@contextmanager
def staged_output(out):
    """Yield a scratch directory whose contents move into ``out`` only on success."""
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    out.mkdir(exist_ok=True)
    for item in sorted(tmp.iterdir()):
        dest = out / item.name
        if dest.is_dir():
            shutil.rmtree(dest)
        os.replace(item, dest)
    tmp.rmdir()


def _write_manifest(directory, command, cfg, **extra):
    manifest = {"command": command, "version": __version__, "config": _jsonable(cfg), **extra}
    (Path(directory) / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def make_backend(name):
    if name == "auto":
        name = "pretrained" if os.environ.get(WEIGHTS_ENV) else "farneback"
    if name == "pretrained":
        return TorchScriptBackend()
    if name == "oracle":
        return TranslationOracle(max_displacement=16)
    return FarnebackBackend()


def _backend_record(backend):
    return {"name": backend.name, "checksum": backend.checksum()}


def _model_config(cfg, channels):
    w = cfg["width"]
    return ModelConfig(channels=channels, mode=cfg["mode"], init_mode=cfg["init_mode"],
                       feature_width=max(4, w // 2), flow_width=w, group_width=w, recon_width=w)


def _frames_tensor(path):
    frames = read_frames_dir(path)
    if any(f.shape != frames[0].shape for f in frames):
        raise CommandError(f"frames in {path} differ in size")
    if len(frames) < 2:
        raise CommandError(f"need at least 2 frames in {path}, found {len(frames)}")
    arr = np.stack(frames).transpose(0, 3, 1, 2)
    return torch.from_numpy(arr.copy()).float()


def _match_channels(frames, channels):
    c = frames.shape[1]
    if c == channels:
        return frames
    if c == 1:
        return frames.repeat(1, channels, 1, 1)
    if channels == 1:
        return frames.mean(dim=1, keepdim=True)
    raise CommandError(f"cannot feed {c}-channel frames to a {channels}-channel model")


def _check_size(frames, levels):
    h, w = frames.shape[-2:]
    if min(h, w) < 2**levels:
        raise CommandError(f"frames of {w}x{h} are too small for {levels} pyramid levels")


def _load_model(cfg, channels):
    if cfg.get("checkpoint"):
        ckpt = load_checkpoint(cfg["checkpoint"])
        return ckpt.build_model(), ckpt
    return build_model(_model_config(cfg, channels), cfg["seed"]), None


def _to_hwc(t):
    return t.detach().cpu().double().numpy().transpose(1, 2, 0)


# --- commands ---------------------------------------------------------------


def _sequence_dirs(path):
    path = Path(path)
    if not path.is_dir():
        raise CommandError(f"not a directory: {path}")
    subdirs = sorted(p for p in path.iterdir() if p.is_dir())
    return subdirs or [path]


def cmd_synth(cfg, out):
    spec_kw = dict(num_frames=cfg["frames"], crop=cfg["crop"], motion_range=cfg["motion_range"],
                   color_jitter=cfg["color_jitter"], task=cfg["task"])
    if not cfg["corrupt"]:
        spec_kw.update(noise_sigma_range=None, jpeg_quality_range=None, vignette_kernel_range=None)
    base = SynthSpec(seed=cfg["seed"], **spec_kw).validate()
    w, h = base.crop
    src_size = (w + 2 * base.motion_range + 16, h + 2 * base.motion_range + 16)
    if cfg["background"]:
        backgrounds = [read_frames_dir(d) for d in _sequence_dirs(cfg["background"])]
    else:
        backgrounds = [procedural_sequence(cfg["seed"] * 7919 + i, 7, src_size) for i in range(4)]
    if base.task == "reflection":
        if cfg["layer"]:
            layers = [read_frames_dir(d) for d in _sequence_dirs(cfg["layer"])]
        else:
            layers = [procedural_sequence(cfg["seed"] * 7919 + 100 + i, 7, src_size, drift=(-2, 1)) for i in range(4)]
    else:
        if cfg["layer"]:
            if not cfg["alpha"]:
                raise CommandError("--layer for fence/raindrop needs --alpha")
            layers = [(read_image(cfg["layer"]), read_image(cfg["alpha"])[..., :1])]
        else:
            layers = [procedural_fence(src_size)]
    for i in range(cfg["count"]):
        seed = cfg["seed"] + i
        spec = SynthSpec(seed=seed, **spec_kw)
        rng = np.random.default_rng(seed)
        bg = backgrounds[int(rng.integers(len(backgrounds)))]
        layer = layers[int(rng.integers(len(layers)))]
        if spec.task == "reflection":
            sample = generate_reflection_sample(spec, bg, layer)
        else:
            sample = generate_obstruction_sample(spec, bg, *layer)
        write_sample(sample, out / f"sample_{i:05d}")
    _write_manifest(out, "synth", cfg, samples=cfg["count"])


def _sample_dirs(path):
    dirs = [p for p in sorted(Path(path).iterdir()) if p.is_dir()]
    if not dirs:
        raise CommandError(f"no sample directories in {path}")
    return dirs


def cmd_pretrain(cfg, out):
    samples = [load_sample_dir(d) for d in _sample_dirs(cfg["data"])]
    if not all("gt_b" in s for s in samples):
        raise CommandError("pretraining needs samples with ground truth (gt_b_*.png)")
    channels = samples[0]["frames"].shape[1]
    if cfg["mode"] == "obstruction" and not all("gt_a" in s for s in samples):
        raise CommandError("obstruction mode needs alpha ground truth (gt_a_*.png)")
    for s in samples:
        _check_size(s["frames"], cfg["levels"])
    tc = TrainConfig(lr_initial=cfg["lr_initial"], lr_final=cfg["lr_final"], stage1_iters=cfg["stage1_iters"],
                     stage2_iters=cfg["stage2_iters"], batch=cfg["batch"], levels=cfg["levels"],
                     lambda_grad=cfg["lambda_grad"], seed=cfg["seed"])
    backend = make_backend(cfg["backend"])
    ck1 = train_stage1(tc, samples, backend, model_config=_model_config(cfg, channels))
    save_checkpoint(ck1, out / "stage1.ckpt")
    ck1.trace.to_csv(out / "stage1_loss.csv")
    ck2 = train_stage2(tc, samples, ck1, backend)
    save_checkpoint(ck2, out / "stage2.ckpt")
    ck2.trace.to_csv(out / "stage2_loss.csv")
    _write_manifest(out, "pretrain", cfg, train_config=tc.to_dict(), backend=_backend_record(backend),
                    architecture_hash=ck2.architecture_hash)


def cmd_metatrain(cfg, out):
    ckpt = load_checkpoint(cfg["checkpoint"], expected_stage=("stage2", "meta"))
    synth = [load_sample_dir(d) for d in _sample_dirs(cfg["synth"])] if cfg["synth"] else None
    real = None
    if cfg["real"]:
        real = [{"frames": _frames_tensor(d)} for d in _sequence_dirs(cfg["real"])]
    if not synth and not real:
        raise CommandError("metatrain needs --synth and/or --real data")
    tc = TrainConfig(meta_iters=cfg["iters"], inner_steps=cfg["inner_steps"], inner_lr=cfg["inner_lr"],
                     reptile_eps=cfg["eps"], synth_ratio=cfg["synth_ratio"], batch=cfg["batch"],
                     levels=cfg["levels"], seed=cfg["seed"])
    backend = make_backend(cfg["backend"])
    meta = meta_train(tc, synth, real, ckpt, backend)
    save_checkpoint(meta, out / "meta.ckpt")
    meta.trace.to_csv(out / "meta_loss.csv")
    _write_manifest(out, "metatrain", cfg, train_config=tc.to_dict(), backend=_backend_record(backend),
                    architecture_hash=meta.architecture_hash)


def _preview(*images):
    tiles = []
    for img in images:
        img = np.clip(img, 0, 1)
        if img.shape[-1] == 1 and images[0].shape[-1] == 3:
            img = np.repeat(img, 3, axis=-1)
        tiles.append(img)
    return np.concatenate(tiles, axis=1)


def _write_layers(out, frames, result, key, backend, prefix=""):
    """Keyframe layers, preview and finest-level flows into the key frame."""
    finest = result.levels[-1]
    write_image(out / f"{prefix}background_{key:03d}.png", _to_hwc(finest.background[key]))
    second = _to_hwc(finest.obstruction[key])
    name = "alpha" if finest.alpha_logit is not None else "obstruction"
    write_image(out / f"{prefix}{name}_{key:03d}.png", second)
    write_image(out / f"{prefix}preview_{key:03d}.png",
                _preview(_to_hwc(frames[key]), _to_hwc(finest.background[key]), second))
    if finest.alpha_logit is not None:
        flows = {"B": finest.flows_b, "F": pairwise_flows(backend, frames * finest.obstruction)}
    else:
        flows = {"B": finest.flows_b, "R": finest.flows_r}
    flow_dir = out / f"{prefix}flows"
    flow_dir.mkdir(exist_ok=True)
    for layer, fs in flows.items():
        for j in range(frames.shape[0]):
            if j != key:
                write_flo(flow_dir / f"{layer}_{j:03d}_to_{key:03d}.flo", fs[j, key].detach().numpy().transpose(1, 2, 0))


def cmd_remove(cfg, out):
    frames = _frames_tensor(cfg["frames"])
    model, ckpt = _load_model(cfg, frames.shape[1])
    frames = _match_channels(frames, model.config.channels)
    _check_size(frames, cfg["levels"])
    t = frames.shape[0]
    key = t // 2 if cfg["keyframe"] is None else cfg["keyframe"]
    if not 0 <= key < t:
        raise CommandError(f"keyframe {key} out of range for {t} frames")
    backend = make_backend(cfg["backend"])
    extra = {"keyframe": key, "num_frames": t, "backend": _backend_record(backend),
             "architecture_hash": model.architecture_hash(),
             "checkpoint_stage": None if ckpt is None else ckpt.stage}
    if cfg["online"]:
        from layersep.checkpoint import Checkpoint

        start = ckpt or Checkpoint.from_model(model, "init", cfg["seed"])
        tc = TrainConfig(online_iters=cfg["online_iters"], online_lr=cfg["online_lr"], levels=cfg["levels"],
                         seed=cfg["seed"])
        adapted, result = online_finetune(tc, frames, start, backend, keyframe=key)
        save_checkpoint(adapted, out / "online.ckpt")
        adapted.trace.to_csv(out / "online_loss.csv")
    else:
        with torch.no_grad():
            result = forward_decompose(model, frames, key, cfg["levels"], backend)
    _write_layers(out, frames, result, key, backend)
    _write_manifest(out, "remove", cfg, **extra)


def _image_pairs(pred, gt):
    pred, gt = Path(pred), Path(gt)
    if pred.is_file() and gt.is_file():
        return [(pred.stem, pred, gt)]
    if not (pred.is_dir() and gt.is_dir()):
        raise CommandError("--pred and --gt must both be files or both be directories")
    suffixes = (".png", ".jpg", ".jpeg")
    p = sorted(x for x in pred.iterdir() if x.suffix.lower() in suffixes)
    g = sorted(x for x in gt.iterdir() if x.suffix.lower() in suffixes)
    if len(p) != len(g) or not p:
        raise CommandError(f"{len(p)} predicted images vs {len(g)} ground-truth images")
    return [(a.stem, a, b) for a, b in zip(p, g)]


def cmd_eval(cfg, out):
    sequence = cfg["sequence"] or Path(cfg["pred"]).stem
    rows = []
    for name, p, g in _image_pairs(cfg["pred"], cfg["gt"]):
        try:
            rep = metrics(read_image(p), read_image(g))
        except ValueError as err:
            raise CommandError(f"{p.name}: {err}") from err
        for row in rep.rows(sequence, cfg["layer"]):
            rows.append({**row, "image": name})
    names = ("psnr", "ssim", "ncc", "lmse")
    mean = {m: float(np.mean([r["value"] for r in rows if r["metric"] == m])) for m in names}
    (out / "metrics.json").write_text(json.dumps({"rows": rows, "mean": mean}, indent=2) + "\n")
    images = sorted({r["image"] for r in rows})
    lines = ["| image | " + " | ".join(n.upper() for n in names) + " |", "|---" * 5 + "|"]
    for img in images:
        vals = {r["metric"]: r["value"] for r in rows if r["image"] == img}
        lines.append(f"| {img} | " + " | ".join(f"{vals[n]:.4f}" for n in names) + " |")
    lines.append("| **mean** | " + " | ".join(f"{mean[n]:.4f}" for n in names) + " |")
    (out / "summary.md").write_text(f"# {sequence} / {cfg['layer']}\n\n" + "\n".join(lines) + "\n")
    _write_manifest(out, "eval", cfg, images=len(images))


def cmd_baselines(cfg, out):
    frames = _frames_tensor(cfg["frames"])
    model, ckpt = _load_model(cfg, frames.shape[1])
    frames = _match_channels(frames, model.config.channels)
    _check_size(frames, cfg["levels"])
    t = frames.shape[0]
    key = t // 2 if cfg["keyframe"] is None else cfg["keyframe"]
    if not 0 <= key < t:
        raise CommandError(f"keyframe {key} out of range for {t} frames")
    backend = make_backend(cfg["backend"])
    methods = ("mean", "median") if cfg["method"] == "both" else (cfg["method"],)
    for method in methods:
        assert method in FUSIONS
        with torch.no_grad():
            result = forward_decompose(model, frames, key, cfg["levels"], backend, fusion=method)
        _write_layers(out, frames, result, key, backend, prefix=f"{method}_")
    _write_manifest(out, "baselines", cfg, keyframe=key, methods=list(methods), backend=_backend_record(backend))


COMMANDS = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "metatrain": cmd_metatrain,
    "remove": cmd_remove,
    "eval": cmd_eval,
    "baselines": cmd_baselines,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.command:
        parser.print_usage(sys.stderr)
        print("layersep: error: a command is required", file=sys.stderr)
        return 2
    try:
        cfg = effective_config(args.command, args)
        out = cfg.get("out")
        if args.command == "remove" and not out:
            out = str(Path(cfg["frames"]).resolve()) + "_layers"
            cfg["out"] = out
        torch.manual_seed(cfg.get("seed") or 0)
        with staged_output(out) as tmp:
            COMMANDS[args.command](cfg, tmp)
    except (CommandError, ValueError, FileNotFoundError, RuntimeError) as err:
        print(f"layersep {args.command}: error: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
