"""Pluggable dense optical-flow estimators and pseudo ground-truth layer flows.

Every backend answers ``estimate(src, dst)`` with a field ``V`` such that
``warp_bilinear(src, V) ~ dst``. Backends are frozen: nothing in the training
code ever updates them, and :meth:`FlowBackend.checksum` lets callers verify
that.
"""

from __future__ import annotations

import hashlib
import itertools
import os
import threading

import numpy as np
import torch

from layersep.tensorgrid import downsample_flow

__all__ = [
    "FlowBackend",
    "ConstantFlowBackend",
    "TranslationOracle",
    "FarnebackBackend",
    "TorchScriptBackend",
    "BackendUnavailable",
    "estimate_flow",
    "ordered_pairs",
    "pairwise_flows",
    "pseudo_gt_layer_flows",
]

WEIGHTS_ENV = "FLOW_WEIGHTS"


class BackendUnavailable(RuntimeError):
    pass


class FlowBackend:
    """Base class. Subclasses implement ``_estimate`` on 4-D batches."""

    name = "base"

    def __init__(self):
        self._lock = threading.Lock()

    def estimate(self, src: torch.Tensor, dst: torch.Tensor) -> torch.Tensor:
        squeeze = src.dim() == 3
        if squeeze:
            src, dst = src.unsqueeze(0), dst.unsqueeze(0)
        if src.shape != dst.shape:
            raise ValueError(f"frame shapes differ: {tuple(src.shape)} vs {tuple(dst.shape)}")
        with self._lock, torch.no_grad():
            flow = self._estimate(src.detach(), dst.detach())
        n, _, h, w = src.shape
        if flow.shape != (n, 2, h, w):
            raise RuntimeError(f"{self.name} returned flow of shape {tuple(flow.shape)}, expected {(n, 2, h, w)}")
        if not torch.isfinite(flow).all():
            raise RuntimeError(f"{self.name} returned non-finite flow")
        flow = flow.to(dtype=src.dtype, device=src.device)
        return flow.squeeze(0) if squeeze else flow

    def _estimate(self, src, dst):
        raise NotImplementedError

    def checksum(self) -> str:
        return hashlib.sha256(repr(self._identity()).encode()).hexdigest()

    def _identity(self):
        return (self.name,)


class ConstantFlowBackend(FlowBackend):
    """Test oracle returning one registered translation for every pair.

    Identical frames carry no motion, so an exactly equal pair yields zeros.
    """

    name = "constant"

    def __init__(self, shift=(0.0, 0.0)):
        super().__init__()
        self.shift = (float(shift[0]), float(shift[1]))

    def _estimate(self, src, dst):
        n, _, h, w = src.shape
        flow = src.new_zeros(n, 2, h, w)
        for i in range(n):
            if not torch.equal(src[i], dst[i]):
                flow[i, 0] = self.shift[0]
                flow[i, 1] = self.shift[1]
        return flow

    def _identity(self):
        return (self.name, self.shift)


class TranslationOracle(FlowBackend):
    """Exhaustive search for the integer global translation between two frames.

    Exact on sequences built from translated copies of one texture, which is
    what the synthetic smoke data uses. Candidates are scored by mean absolute
    difference over the overlap; ties resolve toward the smallest shift.
    """

    name = "translation-oracle"

    def __init__(self, max_displacement: int = 8, min_overlap: float = 0.25):
        super().__init__()
        self.max_displacement = int(max_displacement)
        self.min_overlap = float(min_overlap)
        r = self.max_displacement
        cands = list(itertools.product(range(-r, r + 1), repeat=2))
        self._candidates = sorted(cands, key=lambda d: (abs(d[0]) + abs(d[1]), d))

    def _estimate(self, src, dst):
        n, _, h, w = src.shape
        s = src.cpu().double().numpy()
        d = dst.cpu().double().numpy()
        shifts, errs = [], []
        for dx, dy in self._candidates:
            ow, oh = w - abs(dx), h - abs(dy)
            if ow <= 0 or oh <= 0 or ow * oh < self.min_overlap * h * w:
                continue
            # dst(p) vs src(p + d) over the overlap, all pairs at once
            ys, xs = max(0, -dy), max(0, -dx)
            diff = d[:, :, ys:ys + oh, xs:xs + ow] - s[:, :, ys + dy:ys + dy + oh, xs + dx:xs + dx + ow]
            shifts.append((dx, dy))
            errs.append(np.abs(diff).mean(axis=(1, 2, 3)))
        flow = src.new_zeros(n, 2, h, w)
        if not shifts:
            return flow
        errs = np.stack(errs)
        # first candidate within 1e-12 of the best: ties go to the smallest shift
        pick = np.argmax(errs <= errs.min(axis=0) + 1e-12, axis=0)
        for i in range(n):
            dx, dy = shifts[pick[i]]
            flow[i, 0] = dx
            flow[i, 1] = dy
        return flow

    def _identity(self):
        return (self.name, self.max_displacement, self.min_overlap)


class FarnebackBackend(FlowBackend):
    """Classical dense flow (OpenCV Farneback) on the luminance of both frames."""

    name = "farneback"

    def __init__(self, pyr_scale=0.5, levels=3, winsize=15, iterations=3, poly_n=5, poly_sigma=1.2):
        super().__init__()
        self.params = dict(
            pyr_scale=pyr_scale, levels=levels, winsize=winsize,
            iterations=iterations, poly_n=poly_n, poly_sigma=poly_sigma, flags=0,
        )

    @staticmethod
    def _gray_u8(img: torch.Tensor) -> np.ndarray:
        g = img.mean(dim=0).clamp(0, 1).cpu().numpy()
        return np.round(g * 255).astype(np.uint8)

    def _estimate(self, src, dst):
        import cv2

        out = []
        for i in range(src.shape[0]):
            # cv2 returns f with prev(p) ~ next(p + f); prev=dst, next=src gives our convention
            f = cv2.calcOpticalFlowFarneback(self._gray_u8(dst[i]), self._gray_u8(src[i]), None, **self.params)
            out.append(torch.from_numpy(f).permute(2, 0, 1))
        return torch.stack(out).to(src.dtype)

    def _identity(self):
        return (self.name, tuple(sorted(self.params.items())))


class TorchScriptBackend(FlowBackend):
    """Wraps a pretrained exported flow network (for example PWC-Net).

    ``.pt2`` files are read with ``torch.export``; anything else as TorchScript.

    The module is called as ``module(first, second)`` and must return the
    forward flow ``(N, 2, H, W)`` from ``first`` to ``second``. Weights come
    from ``weights_path`` or the ``FLOW_WEIGHTS`` environment variable.
    """

    name = "torchscript"

    def __init__(self, weights_path: str | os.PathLike | None = None):
        super().__init__()
        path = weights_path or os.environ.get(WEIGHTS_ENV)
        if not path:
            raise BackendUnavailable(f"no flow weights configured; pass a path or set {WEIGHTS_ENV}")
        if not os.path.isfile(path):
            raise BackendUnavailable(f"flow weights not found at {path}")
        self.weights_path = str(path)
        if self.weights_path.endswith(".pt2"):
            self.module = torch.export.load(self.weights_path).module()
        else:
            self.module = torch.jit.load(self.weights_path, map_location="cpu").eval()
        for p in self.module.parameters():
            p.requires_grad_(False)

    def _estimate(self, src, dst):
        dtype = next(self.module.parameters()).dtype
        # forward flow dst -> src is exactly the backward-sampling field src -> dst
        return self.module(dst.to(dtype), src.to(dtype))

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, t in sorted(self.module.state_dict().items()):
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()


def estimate_flow(backend: FlowBackend, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return backend.estimate(a, b)


def ordered_pairs(t: int) -> list[tuple[int, int]]:
    """All ``(j, k)`` with ``j != k``, in row-major order."""
    return [(j, k) for j in range(t) for k in range(t) if j != k]


def pairwise_flows(backend: FlowBackend, frames: torch.Tensor) -> torch.Tensor:
    """Flow set ``(T, T, 2, H, W)`` with entry ``[j, k] = estimate(frames[j], frames[k])``.

    Diagonal entries are zero.
    """
    t, _, h, w = frames.shape
    pairs = ordered_pairs(t)
    out = frames.new_zeros(t, t, 2, h, w)
    if not pairs:
        return out
    js = [j for j, _ in pairs]
    ks = [k for _, k in pairs]
    flows = backend.estimate(frames[js], frames[ks])
    out[js, ks] = flows
    return out


def pseudo_gt_layer_flows(backend: FlowBackend, gt_b: torch.Tensor, gt_r: torch.Tensor | None, levels: int):
    """Pseudo ground-truth flow sets at the coarsest pyramid scale.

    Flows are estimated on the full-resolution ground-truth layers and then
    downsampled by ``2**levels`` with values divided by the same factor.
    Returns ``{"B": (T, T, 2, h, w), "R": ...}``; ``"R"`` is omitted when
    ``gt_r`` is None.
    """
    if gt_r is not None and gt_b.shape != gt_r.shape:
        raise ValueError(f"layer sequences differ in shape: {tuple(gt_b.shape)} vs {tuple(gt_r.shape)}")
    out = {}
    for key, seq in (("B", gt_b), ("R", gt_r)):
        if seq is None:
            continue
        full = pairwise_flows(backend, seq)
        t = full.shape[0]
        coarse = downsample_flow(full.flatten(0, 1), 2**levels)
        out[key] = coarse.view(t, t, *coarse.shape[1:])
    return out
