"""Checkpoint archives.

A checkpoint is a zip archive holding one ``.npy`` file per parameter, the
optimizer tensors, and ``manifest.json`` (architecture hash, configs, stage,
seed, iteration). Entries carry a fixed timestamp and a fixed order, so saving
the same state twice yields identical bytes.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from layersep.decompnet import DecompositionModel, ModelConfig

__all__ = [
    "STAGES",
    "FORMAT_VERSION",
    "Checkpoint",
    "CheckpointFormatError",
    "CheckpointMismatch",
    "save_checkpoint",
    "load_checkpoint",
    "param_checksum",
]

STAGES = ("init", "stage1", "stage2", "meta", "online")
FORMAT_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


class CheckpointFormatError(ValueError):
    pass


class CheckpointMismatch(ValueError):
    pass


def param_checksum(params) -> str:
    """sha256 over names, dtypes, shapes and raw bytes of a name -> tensor mapping."""
    h = hashlib.sha256()
    for name in sorted(params):
        arr = params[name].detach().cpu().contiguous().numpy() if isinstance(params[name], torch.Tensor) else np.asarray(params[name])
        h.update(name.encode())
        h.update(str(arr.dtype).encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: "OrderedDict[str, torch.Tensor]"
    stage: str
    architecture_hash: str
    seed: int = 0
    iteration: int = 0
    train_config: dict = field(default_factory=dict)
    optimizer_state: dict | None = None
    trace: object = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {self.stage!r}")

    @classmethod
    def from_model(cls, model: DecompositionModel, stage, seed=0, iteration=0, train_config=None,
                   optimizer_state=None, trace=None):
        params = OrderedDict((k, v.detach().clone()) for k, v in model.state_dict().items())
        return cls(model.config, params, stage, model.architecture_hash(), seed, iteration,
                   dict(train_config or {}), optimizer_state, trace)

    def build_model(self) -> DecompositionModel:
        model = DecompositionModel(self.model_config)
        self.load_into(model)
        return model

    def load_into(self, model: DecompositionModel):
        ours = model.architecture_hash()
        if ours != self.architecture_hash:
            raise CheckpointMismatch(
                f"incompatible checkpoint: archive architecture {self.architecture_hash}, model architecture {ours}"
            )
        model.load_state_dict(self.params)
        return model

    def require_stage(self, *allowed):
        if self.stage not in allowed:
            raise ValueError(f"expected a checkpoint from stage {' or '.join(allowed)}, got {self.stage!r}")
        return self

    def flow_checksum(self) -> str:
        return param_checksum({k: v for k, v in self.params.items() if k.startswith("flow_decomp.")})

    def recon_checksum(self) -> str:
        return param_checksum({k: v for k, v in self.params.items() if not k.startswith("flow_decomp.")})


def _npy_bytes(t) -> bytes:
    buf = io.BytesIO()
    arr = t.detach().cpu().contiguous().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
    np.save(buf, arr, allow_pickle=False)
    return buf.getvalue()


def _npy_load(data: bytes) -> torch.Tensor:
    return torch.from_numpy(np.load(io.BytesIO(data), allow_pickle=False).copy())


def _split_optimizer(state):
    """Separate an optimizer ``state_dict`` into JSON metadata and tensor entries."""
    tensors = OrderedDict()
    meta_state = {}
    for idx in sorted(state["state"]):
        entry = {}
        for key in sorted(state["state"][idx]):
            val = state["state"][idx][key]
            if isinstance(val, torch.Tensor):
                name = f"optimizer/{idx}/{key}.npy"
                tensors[name] = val
                entry[key] = {"tensor": name}
            else:
                entry[key] = val
        meta_state[str(idx)] = entry
    groups = [{k: (list(v) if isinstance(v, tuple) else v) for k, v in g.items()} for g in state["param_groups"]]
    return {"state": meta_state, "param_groups": groups}, tensors


def _join_optimizer(meta, read):
    state = {}
    for idx, entry in meta["state"].items():
        state[int(idx)] = {k: (read(v["tensor"]) if isinstance(v, dict) and "tensor" in v else v) for k, v in entry.items()}
    groups = [{k: (tuple(v) if k == "betas" else v) for k, v in g.items()} for g in meta["param_groups"]]
    return {"state": state, "param_groups": groups}


def _write_entry(zf, name, data):
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def save_checkpoint(ckpt: Checkpoint, path):
    path = Path(path)
    entries = OrderedDict()
    names = list(ckpt.params)
    for i, name in enumerate(names):
        entries[f"params/{i:04d}.npy"] = _npy_bytes(ckpt.params[name])
    opt_meta = None
    if ckpt.optimizer_state is not None:
        opt_meta, tensors = _split_optimizer(ckpt.optimizer_state)
        for name, t in tensors.items():
            entries[name] = _npy_bytes(t)
    manifest = {
        "format_version": FORMAT_VERSION,
        "architecture_hash": ckpt.architecture_hash,
        "model_config": ckpt.model_config.to_dict(),
        "train_config": ckpt.train_config,
        "stage": ckpt.stage,
        "seed": ckpt.seed,
        "iteration": ckpt.iteration,
        "parameters": names,
        "optimizer": opt_meta,
    }
    tmp = path.with_name(path.name + ".part")
    with zipfile.ZipFile(tmp, "w") as zf:
        _write_entry(zf, "manifest.json", json.dumps(manifest, indent=2, sort_keys=True))
        for name, data in entries.items():
            _write_entry(zf, name, data)
    tmp.replace(path)
    return path


def load_checkpoint(path, expected_stage=None) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            listing = set(zf.namelist())
            if "manifest.json" not in listing:
                raise CheckpointFormatError(f"{path}: archive has no manifest.json")
            manifest = json.loads(zf.read("manifest.json"))
            if manifest.get("format_version") != FORMAT_VERSION:
                raise CheckpointFormatError(f"{path}: unsupported format version {manifest.get('format_version')}")

            def read(name):
                if name not in listing:
                    raise CheckpointFormatError(f"{path}: missing entry {name}")
                return _npy_load(zf.read(name))

            params = OrderedDict(
                (name, read(f"params/{i:04d}.npy")) for i, name in enumerate(manifest["parameters"])
            )
            opt = None if manifest["optimizer"] is None else _join_optimizer(manifest["optimizer"], read)
    except (zipfile.BadZipFile, EOFError, json.JSONDecodeError, KeyError) as err:
        raise CheckpointFormatError(f"{path}: unreadable checkpoint archive ({err})") from err
    ckpt = Checkpoint(
        ModelConfig(**manifest["model_config"]),
        params,
        manifest["stage"],
        manifest["architecture_hash"],
        manifest["seed"],
        manifest["iteration"],
        manifest["train_config"],
        opt,
    )
    if expected_stage is not None:
        allowed = (expected_stage,) if isinstance(expected_stage, str) else tuple(expected_stage)
        ckpt.require_stage(*allowed)
    return ckpt
