"""Training losses.

All L1 terms are pixel means (mean over channels and pixels of one image), so
magnitudes do not depend on resolution. Sums over frames, pairs and pyramid
levels follow the loss definitions otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Mapping, Sequence

import torch

from layersep.decompnet import DecompositionResult
from layersep.flowbackend import FlowBackend, ordered_pairs, pairwise_flows
from layersep.tensorgrid import spatial_gradient, warp_bilinear

__all__ = [
    "LAMBDA_GRAD",
    "LAMBDA_TV",
    "LossReport",
    "decomposition_loss",
    "supervised_loss",
    "unsupervised_loss",
    "reconstruct_frames",
]

LAMBDA_GRAD = 1.0
LAMBDA_TV = 0.1


@dataclass
class LossReport:
    dec: torch.Tensor | None = None
    img: torch.Tensor | None = None
    grad: torch.Tensor | None = None
    supervised: torch.Tensor | None = None
    warp: torch.Tensor | None = None
    tv: torch.Tensor | None = None
    unsupervised: torch.Tensor | None = None
    lambda_grad: float = LAMBDA_GRAD
    lambda_tv: float = LAMBDA_TV
    reptile_eps: float | None = None

    def to_dict(self) -> dict[str, float]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None:
                continue
            out[f.name] = float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
        return out


def _l1(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return (a - b).abs().mean()


def _grad_l1(x: torch.Tensor) -> torch.Tensor:
    gx, gy = spatial_gradient(x)
    return gx.abs().mean() + gy.abs().mean()


def _pair_index(t):
    pairs = ordered_pairs(t)
    return [j for j, _ in pairs], [k for _, k in pairs]


def decomposition_loss(pred: Mapping[str, torch.Tensor], pseudo_gt: Mapping[str, torch.Tensor]) -> torch.Tensor:
    """L1 between predicted initial flow sets and pseudo ground truth.

    Both arguments map layer names (``"B"``, ``"R"``) to ``(T, T, 2, h, w)``
    flow sets. Each layer contributes its mean absolute error over ordered
    pairs, pixels and flow components; the layer terms are summed.
    """
    if set(pseudo_gt) - set(pred):
        raise ValueError(f"missing predicted layers: {sorted(set(pseudo_gt) - set(pred))}")
    total = None
    for key, target in pseudo_gt.items():
        p = pred[key]
        if p.shape != target.shape:
            raise ValueError(f"layer {key}: predicted flows {tuple(p.shape)} vs targets {tuple(target.shape)}")
        js, ks = _pair_index(p.shape[0])
        term = _l1(p[js, ks], target[js, ks])
        total = term if total is None else total + term
    return total


def supervised_loss(
    result: DecompositionResult,
    gt_background: Sequence[torch.Tensor],
    gt_obstruction: Sequence[torch.Tensor],
    lambda_grad: float = LAMBDA_GRAD,
) -> LossReport:
    """Image and gradient L1 against ground-truth pyramids (coarsest level first).

    The obstruction slot is the reflection layer, or the alpha matte in
    obstruction mode. The outer normaliser is ``1 / (T * L)`` with ``L`` the
    number of levels above the coarsest, while the level sum runs over all
    ``L + 1`` levels.
    """
    n_levels = len(result.levels)
    if len(gt_background) != n_levels or len(gt_obstruction) != n_levels:
        raise ValueError(
            f"prediction has {n_levels} levels, ground truth has {len(gt_background)} / {len(gt_obstruction)}"
        )
    if n_levels < 2:
        raise ValueError("supervised loss needs at least two pyramid levels")
    t = result.levels[0].background.shape[0]
    norm = 1.0 / (t * (n_levels - 1))
    img = 0.0
    grad = 0.0
    for level, gb, go in zip(result.levels, gt_background, gt_obstruction):
        pb, po = level.background, level.obstruction
        if pb.shape != gb.shape or po.shape != go.shape:
            raise ValueError(f"shape mismatch at level of size {level.size}")
        for i in range(t):
            img = img + _l1(pb[i], gb[i]) + _l1(po[i], go[i])
            grad = grad + _grad_l1(pb[i] - gb[i]) + _grad_l1(po[i] - go[i])
    img = img * norm
    grad = grad * norm
    return LossReport(img=img, grad=grad, supervised=img + lambda_grad * grad, lambda_grad=lambda_grad)


def reconstruct_frames(level, frames: torch.Tensor, key: int, flows_f: torch.Tensor | None = None) -> torch.Tensor:
    """Re-synthesise every frame from keyframe ``key``'s layers at one level.

    Reflection: ``W(B_k, V_B[k, j]) + W(R_k, V_R[k, j])``.
    Obstruction: ``W(F_k, V_F[k, j]) + W(1 - A_k, V_F[k, j]) * W(B_k, V_B[k, j])``
    with ``F_k = I_k * A_k``.
    """
    t = frames.shape[0]
    b = level.background[key].unsqueeze(0).expand(t, -1, -1, -1)
    vb = level.flows_b[key]
    if level.alpha_logit is None:
        r = level.obstruction[key].unsqueeze(0).expand(t, -1, -1, -1)
        return warp_bilinear(b, vb) + warp_bilinear(r, level.flows_r[key])
    if flows_f is None:
        raise ValueError("obstruction mode needs foreground flows")
    a = level.obstruction[key]
    fg = (frames[key] * a).unsqueeze(0).expand(t, -1, -1, -1)
    inv = (1 - a).unsqueeze(0).expand(t, -1, -1, -1)
    vf = flows_f[key]
    return warp_bilinear(fg, vf) + warp_bilinear(inv, vf) * warp_bilinear(b, vb)


def unsupervised_loss(
    result: DecompositionResult,
    frame_pyramid: Sequence[torch.Tensor],
    lambda_tv: float = LAMBDA_TV,
    backend: FlowBackend | None = None,
    foreground_flows: Sequence[torch.Tensor] | None = None,
) -> LossReport:
    """Warping consistency plus total variation, with no ground truth.

    ``frame_pyramid`` holds the input frames per level, coarsest first. In
    obstruction mode the foreground flows are either given per level or
    estimated with ``backend`` on ``I_k * A_k``.
    """
    n_levels = len(result.levels)
    if len(frame_pyramid) != n_levels:
        raise ValueError(f"prediction has {n_levels} levels, frame pyramid has {len(frame_pyramid)}")
    obstruction_mode = result.levels[0].alpha_logit is not None
    warp = 0.0
    tv = 0.0
    for lvl, (level, frames) in enumerate(zip(result.levels, frame_pyramid)):
        t = frames.shape[0]
        if level.flows_b is None or (not obstruction_mode and level.flows_r is None):
            raise ValueError(f"missing layer flows at level {lvl}")
        flows_f = None
        if obstruction_mode:
            if foreground_flows is not None:
                flows_f = foreground_flows[lvl]
            elif backend is not None:
                flows_f = pairwise_flows(backend, (frames * level.obstruction).detach())
            else:
                raise ValueError("obstruction mode needs a backend or foreground flows")
        for k in range(t):
            recon = reconstruct_frames(level, frames, k, flows_f)
            for j in range(t):
                if j != k:
                    warp = warp + _l1(frames[j], recon[j])
        for i in range(t):
            tv = tv + _grad_l1(level.background[i]) + _grad_l1(level.obstruction[i])
    return LossReport(warp=warp, tv=tv, unsupervised=warp + lambda_tv * tv, lambda_tv=lambda_tv)
