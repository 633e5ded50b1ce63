"""Coarse-to-fine layer decomposition network.

A sequence of ``T`` frames is a ``(T, C, H, W)`` tensor. Every frame is
decomposed in turn (each acting as keyframe), because flow refinement and the
training losses need the layers of all frames. Flow sets are ``(T, T, 2, h, w)``
tensors where entry ``[j, k]`` registers frame ``j`` onto frame ``k``::

    warp_bilinear(I_j, V[j, k]) ~ I_k

In reflection mode each level holds a background and a reflection layer. In
obstruction mode (fences, raindrops) the second slot holds the logit of an
alpha matte and no obstruction flow is estimated.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from layersep.flowbackend import FlowBackend, pairwise_flows
from layersep.tensorgrid import build_pyramid, upsample_flow_2x, visibility_mask, warp_bilinear

__all__ = [
    "ModelConfig",
    "DecompositionModel",
    "FlowDecompositionNet",
    "ReconstructionNet",
    "GroupFeatures",
    "LevelState",
    "DecompositionResult",
    "cost_volume",
    "initial_flow_decomposition",
    "init_layers",
    "assemble_groups",
    "reconstruct_level",
    "forward_decompose",
    "fuse_baseline",
    "upsample_image",
    "standardize",
]

MODES = ("reflection", "obstruction")
INIT_MODES = ("uniform", "dense", "zero")
FUSIONS = ("network", "mean", "median")


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 3
    mode: str = "reflection"
    init_mode: str = "uniform"
    search_range: int = 4
    feature_width: int = 16
    flow_width: int = 32
    group_width: int = 32
    recon_width: int = 32

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.init_mode not in INIT_MODES:
            raise ValueError(f"init_mode must be one of {INIT_MODES}, got {self.init_mode!r}")
        if self.channels < 1 or self.search_range < 0:
            raise ValueError("channels must be >= 1 and search_range >= 0")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _conv(cin, cout):
    return nn.Conv2d(cin, cout, kernel_size=3, padding=1)


def _act():
    return nn.LeakyReLU(0.1)


def _kaiming(module):
    # default conv init shrinks activations layer by layer, which stalls the deep flow estimator
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, a=0.1, nonlinearity="leaky_relu")
            nn.init.zeros_(m.bias)


def standardize(frames: torch.Tensor, eps: float = 1e-3) -> torch.Tensor:
    """Zero mean, unit standard deviation per frame."""
    mean = frames.mean(dim=(1, 2, 3), keepdim=True)
    std = frames.std(dim=(1, 2, 3), keepdim=True, unbiased=False)
    return (frames - mean) / (std + eps)


def cost_volume(cj: torch.Tensor, ck: torch.Tensor, search_range: int = 4) -> torch.Tensor:
    """Correlation of ``cj`` at ``x`` with ``ck`` at ``x + d`` for ``|d|_inf <= search_range``.

    Output has ``(2r + 1)**2`` channels ordered by ``dy`` then ``dx``.
    Partners outside the map count as zero features.
    """
    if cj.shape != ck.shape:
        raise ValueError(f"feature shapes differ: {tuple(cj.shape)} vs {tuple(ck.shape)}")
    r = search_range
    _, _, h, w = cj.shape
    padded = F.pad(ck, (r, r, r, r))
    out = []
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            shifted = padded[:, :, r + dy:r + dy + h, r + dx:r + dx + w]
            out.append((cj * shifted).sum(dim=1))
    return torch.stack(out, dim=1)


class FlowDecompositionNet(nn.Module):
    """Feature extractor plus layer flow estimator at the coarsest scale.

    The estimator runs six convolutions on ``[cost volume, c_j]``, then either
    global-average-pools into a linear head producing one motion vector per
    layer (``uniform``), or keeps a per-pixel head (``dense`` ablation).
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c, f, h = config.channels, config.feature_width, config.flow_width
        self.extractor = nn.Sequential(_conv(c, f), _act(), _conv(f, f), _act(), _conv(f, f))
        n_disp = (2 * config.search_range + 1) ** 2
        layers = []
        cin = n_disp + f
        for _ in range(6):
            layers += [_conv(cin, h), _act()]
            cin = h
        self.estimator = nn.Sequential(*layers)
        if config.init_mode == "dense":
            self.head = _conv(h, 4)
        else:
            self.head = nn.Linear(h, 4)
        _kaiming(self.extractor)
        _kaiming(self.estimator)

    def forward(self, frames: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        t, _, h, w = frames.shape
        if t < 2:
            raise ValueError(f"need at least 2 frames, got {t}")
        zeros = frames.new_zeros(t, t, 2, h, w)
        if self.config.init_mode == "zero":
            return zeros, zeros.clone()
        feats = self.extractor(standardize(frames))
        js = [j for j in range(t) for k in range(t) if j != k]
        ks = [k for j in range(t) for k in range(t) if j != k]
        cv = cost_volume(feats[js], feats[ks], self.config.search_range)
        x = self.estimator(torch.cat([cv, feats[js]], dim=1))
        if self.config.init_mode == "dense":
            vec = self.head(x)
        else:
            vec = self.head(x.mean(dim=(2, 3)))[:, :, None, None].expand(-1, -1, h, w)
        vb = zeros.clone()
        vr = zeros.clone()
        vb[js, ks] = vec[:, :2]
        vr[js, ks] = vec[:, 2:]
        return vb, vr


class ReconstructionNet(nn.Module):
    """Shared per-group feature extractor, max fusion, residual predictor."""

    def __init__(self, config: ModelConfig, out_channels: int):
        super().__init__()
        c, g, r = config.channels, config.group_width, config.recon_width
        # registered, difference, mask, previous background, previous reflection or alpha
        in_ch = 3 * c + 1 + (c if config.mode == "reflection" else 1)
        self.extractor = nn.Sequential(
            _conv(in_ch, g), _act(), _conv(g, g), _act(), _conv(g, g), _act(), _conv(g, g), _act(), _conv(g, g)
        )
        self.decoder = nn.Sequential(_conv(g, r), _act(), _conv(r, r), _act(), _conv(r, out_channels))
        _kaiming(self)
        # start as the identity refinement: zero residual on top of the upsampled previous layer
        nn.init.zeros_(self.decoder[-1].weight)
        nn.init.zeros_(self.decoder[-1].bias)

    def fuse(self, groups: torch.Tensor) -> torch.Tensor:
        if groups.shape[0] == 0:
            raise ValueError("reconstruction needs at least one group")
        return self.extractor(groups).max(dim=0, keepdim=True).values

    def forward(self, groups: torch.Tensor) -> torch.Tensor:
        """``(G, in_ch, h, w)`` groups -> ``(out_channels, h, w)`` residual."""
        return self.decoder(self.fuse(groups))[0]


class DecompositionModel(nn.Module):
    """Flow decomposition network plus one reconstruction network per layer.

    In obstruction mode the background network carries one extra output
    channel (the alpha logit residual) and there is no second network.
    """

    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = config or ModelConfig()
        c = self.config.channels
        self.flow_decomp = FlowDecompositionNet(self.config)
        if self.config.mode == "reflection":
            self.recon_b = ReconstructionNet(self.config, c)
            self.recon_r = ReconstructionNet(self.config, c)
        else:
            self.recon_b = ReconstructionNet(self.config, c + 1)
            self.recon_r = None

    def flow_parameters(self) -> list[nn.Parameter]:
        return list(self.flow_decomp.parameters())

    def recon_modules(self) -> dict[str, nn.Module]:
        mods = {"recon_b": self.recon_b}
        if self.recon_r is not None:
            mods["recon_r"] = self.recon_r
        return mods

    def recon_parameters(self) -> list[nn.Parameter]:
        return [p for m in self.recon_modules().values() for p in m.parameters()]

    def architecture_hash(self) -> str:
        desc = {
            "config": self.config.to_dict(),
            "params": [[n, list(p.shape)] for n, p in self.state_dict().items()],
        }
        return hashlib.sha256(json.dumps(desc, sort_keys=True).encode()).hexdigest()


@dataclass
class GroupFeatures:
    """The five maps built for one non-keyframe ``source`` against keyframe ``keyframe``."""

    source: int
    keyframe: int
    registered: torch.Tensor
    difference: torch.Tensor
    mask: torch.Tensor
    prev_background: torch.Tensor
    prev_obstruction: torch.Tensor

    MAPS = ("registered", "difference", "mask", "prev_background", "prev_obstruction")

    def stack(self) -> torch.Tensor:
        return torch.cat([getattr(self, m) for m in self.MAPS], dim=0)


@dataclass
class LevelState:
    background: torch.Tensor
    obstruction: torch.Tensor
    flows_b: torch.Tensor
    flows_r: torch.Tensor | None = None
    alpha_logit: torch.Tensor | None = None

    @property
    def size(self) -> tuple[int, int]:
        return tuple(self.background.shape[-2:])


@dataclass
class DecompositionResult:
    """Per-level layers (all frames) and flow sets; level 0 is the coarsest."""

    levels: list[LevelState]
    keyframe: int
    mode: str
    extras: dict = field(default_factory=dict)

    @property
    def background(self) -> torch.Tensor:
        return self.levels[-1].background[self.keyframe]

    @property
    def obstruction(self) -> torch.Tensor:
        return self.levels[-1].obstruction[self.keyframe]


def upsample_image(img: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    squeeze = img.dim() == 3
    x = img.unsqueeze(0) if squeeze else img
    out = F.interpolate(x, size=size, mode="bilinear", align_corners=False)
    return out[0] if squeeze else out


def initial_flow_decomposition(model: DecompositionModel, coarse_frames: torch.Tensor):
    """Uniform background / obstruction flow sets at the coarsest scale."""
    return model.flow_decomp(coarse_frames)


def init_layers(frames: torch.Tensor, flows: torch.Tensor) -> torch.Tensor:
    """Average of all frames registered onto each keyframe.

    Returns ``(T, C, h, w)``: entry ``k`` is ``mean_j warp(I_j, flows[j, k])``.
    """
    t = frames.shape[0]
    out = []
    for k in range(t):
        out.append(warp_bilinear(frames, flows[:, k]).mean(dim=0))
    return torch.stack(out)


def assemble_groups(
    frames: torch.Tensor,
    keyframe: int,
    prev_flows: torch.Tensor,
    prev_background: torch.Tensor,
    prev_obstruction: torch.Tensor,
) -> list[GroupFeatures]:
    """Build the ``T - 1`` groups for ``keyframe`` at the current level.

    ``prev_flows`` is the previous level's flow set; ``prev_background`` and
    ``prev_obstruction`` are the keyframe's previous-level layers. All three
    are upsampled to the size of ``frames``.
    """
    if prev_background is None or prev_obstruction is None or prev_flows is None:
        raise ValueError("assemble_groups needs the previous level's layers and flows")
    t, _, h, w = frames.shape
    b_up = upsample_image(prev_background, (h, w))
    o_up = upsample_image(prev_obstruction, (h, w))
    groups = []
    for j in range(t):
        if j == keyframe:
            continue
        flow = upsample_flow_2x(prev_flows[j, keyframe], size=(h, w))
        registered = warp_bilinear(frames[j], flow)
        groups.append(GroupFeatures(
            source=j,
            keyframe=keyframe,
            registered=registered,
            difference=(registered - frames[keyframe]).abs(),
            mask=visibility_mask(flow),
            prev_background=b_up,
            prev_obstruction=o_up,
        ))
    return groups


def reconstruct_level(net: ReconstructionNet, groups, prev_layer: torch.Tensor) -> torch.Tensor:
    """Residual reconstruction: ``net(max over groups) + upsample(prev_layer)``."""
    if isinstance(groups, (list, tuple)):
        if not groups:
            raise ValueError("reconstruction needs at least one group")
        groups = torch.stack([g.stack() for g in groups])
    h, w = groups.shape[-2:]
    return net(groups) + upsample_image(prev_layer, (h, w))


def fuse_baseline(frames: torch.Tensor, flows_to_key: torch.Tensor, method: str = "mean") -> torch.Tensor:
    """Temporal mean or median of frames registered by ``flows_to_key`` (``(T, 2, h, w)``).

    Pixels whose sample leaves the image are excluded; the keyframe's own
    entry should carry zero flow so at least one sample is always visible.
    """
    if method not in ("mean", "median"):
        raise ValueError(f"method must be 'mean' or 'median', got {method!r}")
    aligned = warp_bilinear(frames, flows_to_key)
    mask = visibility_mask(flows_to_key).expand_as(aligned)
    if method == "mean":
        return (aligned * mask).sum(0) / mask.sum(0).clamp_min(1)
    masked = torch.where(mask > 0, aligned, torch.full_like(aligned, float("nan")))
    med = torch.nanmedian(masked, dim=0).values
    return torch.nan_to_num(med, nan=0.0)


def _refine(backend: FlowBackend, layers: torch.Tensor) -> torch.Tensor:
    return pairwise_flows(backend, layers.detach())


def forward_decompose(
    model: DecompositionModel,
    frames: torch.Tensor,
    keyframe: int | None = None,
    levels: int = 5,
    backend: FlowBackend | None = None,
    fusion: str = "network",
) -> DecompositionResult:
    """Run the full coarse-to-fine decomposition.

    ``fusion`` selects the learned reconstruction (default) or a temporal
    mean / median of the registered frames at every level.
    """
    if backend is None:
        raise ValueError("forward_decompose needs a flow backend for refinement")
    if fusion not in FUSIONS:
        raise ValueError(f"fusion must be one of {FUSIONS}, got {fusion!r}")
    if frames.dim() != 4:
        raise ValueError(f"frames must be (T, C, H, W), got {tuple(frames.shape)}")
    t, c, _, _ = frames.shape
    if t < 2:
        raise ValueError(f"need at least 2 frames, got {t}")
    if c != model.config.channels:
        raise ValueError(f"model expects {model.config.channels} channels, frames have {c}")
    k = t // 2 if keyframe is None else keyframe
    if not 0 <= k < t:
        raise ValueError(f"keyframe {k} out of range for {t} frames")
    obstruction_mode = model.config.mode == "obstruction"

    pyr = build_pyramid(frames, levels)
    vb, vr = initial_flow_decomposition(model, pyr[0])
    b = init_layers(pyr[0], vb)
    if obstruction_mode:
        z = frames.new_zeros(t, 1, *pyr[0].shape[-2:])
        states = [LevelState(b, torch.sigmoid(z), vb, None, z)]
    else:
        r = init_layers(pyr[0], vr)
        states = [LevelState(b, r, vb, vr)]

    for lvl in range(1, levels + 1):
        cur = pyr[lvl]
        h, w = cur.shape[-2:]
        prev = states[-1]
        new_b, new_o = [], []
        for key in range(t):
            if fusion != "network":
                fb = upsample_flow_2x(prev.flows_b[:, key], size=(h, w))
                new_b.append(fuse_baseline(cur, fb, fusion))
                if not obstruction_mode:
                    fr = upsample_flow_2x(prev.flows_r[:, key], size=(h, w))
                    new_o.append(fuse_baseline(cur, fr, fusion))
                else:
                    new_o.append(upsample_image(prev.alpha_logit[key], (h, w)))
                continue
            groups_b = assemble_groups(cur, key, prev.flows_b, prev.background[key], prev.obstruction[key])
            if obstruction_mode:
                prev_state = torch.cat([prev.background[key], prev.alpha_logit[key]], dim=0)
                out = reconstruct_level(model.recon_b, groups_b, prev_state)
                new_b.append(out[:c])
                new_o.append(out[c:])
            else:
                groups_r = assemble_groups(cur, key, prev.flows_r, prev.background[key], prev.obstruction[key])
                new_b.append(reconstruct_level(model.recon_b, groups_b, prev.background[key]))
                new_o.append(reconstruct_level(model.recon_r, groups_r, prev.obstruction[key]))
        b = torch.stack(new_b)
        flows_b = _refine(backend, b)
        if obstruction_mode:
            z = torch.stack(new_o)
            states.append(LevelState(b, torch.sigmoid(z), flows_b, None, z))
        else:
            r = torch.stack(new_o)
            states.append(LevelState(b, r, flows_b, _refine(backend, r)))
    return DecompositionResult(states, k, model.config.mode)
