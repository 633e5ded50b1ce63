"""Evaluation metrics on images with intensities in [0, 1].

Images are numpy arrays shaped ``(H, W)`` or ``(H, W, C)``; torch tensors in
``(C, H, W)`` layout are converted.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

__all__ = ["MetricReport", "psnr", "ssim", "ncc", "lmse", "metrics", "to_hwc"]

MSE_FLOOR = 1e-10
SSIM_SIGMA = 1.5
SSIM_TRUNCATE = 3.5  # radius 5 at sigma 1.5: an 11x11 window
SSIM_K1, SSIM_K2 = 0.01, 0.03
LMSE_WINDOW = 20
LMSE_STRIDE = 10


@dataclass
class MetricReport:
    psnr: float
    ssim: float
    ncc: float
    lmse: float

    def rows(self, sequence: str, layer: str) -> list[dict]:
        return [
            {"sequence": sequence, "layer": layer, "metric": name, "value": value}
            for name, value in asdict(self).items()
        ]

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def to_hwc(img) -> np.ndarray:
    try:
        import torch
    except ImportError:  # pragma: no cover
        torch = None
    if torch is not None and isinstance(img, torch.Tensor):
        arr = img.detach().cpu().double().numpy()
        if arr.ndim == 3:
            arr = arr.transpose(1, 2, 0)
        return arr
    return np.asarray(img, dtype=np.float64)


def _check(pred, gt):
    pred, gt = to_hwc(pred), to_hwc(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"size mismatch: {pred.shape} vs {gt.shape}")
    for name, arr in (("prediction", pred), ("ground truth", gt)):
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"{name} contains non-finite values")
        if arr.min() < 0 or arr.max() > 1:
            raise ValueError(f"{name} values outside [0, 1]: [{arr.min():.4g}, {arr.max():.4g}]")
    return pred, gt


def psnr(pred, gt) -> float:
    pred, gt = _check(pred, gt)
    mse = max(float(np.mean((pred - gt) ** 2)), MSE_FLOOR)
    return -10.0 * math.log10(mse)


def _ssim_channel(x, y):
    c1 = SSIM_K1**2
    c2 = SSIM_K2**2
    blur = lambda a: gaussian_filter(a, SSIM_SIGMA, truncate=SSIM_TRUNCATE)  # noqa: E731
    mx, my = blur(x), blur(y)
    sxx = blur(x * x) - mx * mx
    syy = blur(y * y) - my * my
    sxy = blur(x * y) - mx * my
    s = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
    pad = int(SSIM_TRUNCATE * SSIM_SIGMA + 0.5)
    if s.shape[0] > 2 * pad and s.shape[1] > 2 * pad:
        s = s[pad:-pad, pad:-pad]
    return float(s.mean())


def ssim(pred, gt) -> float:
    """Gaussian-window SSIM (11x11, sigma 1.5), averaged over channels."""
    pred, gt = _check(pred, gt)
    if pred.ndim == 2:
        return _ssim_channel(pred, gt)
    return float(np.mean([_ssim_channel(pred[..., c], gt[..., c]) for c in range(pred.shape[-1])]))


def ncc(pred, gt) -> float:
    """Global zero-mean normalised cross-correlation."""
    pred, gt = _check(pred, gt)
    a = pred - pred.mean()
    b = gt - gt.mean()
    denom = math.sqrt(float((a * a).sum()) * float((b * b).sum()))
    if denom == 0:
        return 1.0 if np.array_equal(pred, gt) else 0.0
    return float((a * b).sum()) / denom


def lmse(pred, gt, window: int = LMSE_WINDOW, stride: int = LMSE_STRIDE) -> float:
    """Mean over windows of the scale-invariant MSE ``min_a mean((gt - a * pred)**2)``."""
    pred, gt = _check(pred, gt)
    h, w = gt.shape[:2]
    wy, wx = min(window, h), min(window, w)
    errs = []
    for y in range(0, h - wy + 1, stride):
        for x in range(0, w - wx + 1, stride):
            p = pred[y:y + wy, x:x + wx].ravel()
            g = gt[y:y + wy, x:x + wx].ravel()
            pp = float(p @ p)
            alpha = float(p @ g) / pp if pp > 0 else 0.0
            errs.append(float(np.mean((g - alpha * p) ** 2)))
    return float(np.mean(errs))


def metrics(pred, gt) -> MetricReport:
    return MetricReport(psnr=psnr(pred, gt), ssim=ssim(pred, gt), ncc=ncc(pred, gt), lmse=lmse(pred, gt))
