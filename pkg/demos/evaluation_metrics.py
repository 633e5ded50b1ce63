"""
Evaluation metrics
==================

PSNR and SSIM measure absolute fidelity. NCC and LMSE ignore a global (or,
for LMSE, per-window) intensity scale, which matters for layers recovered
only up to brightness.
"""

import numpy as np

from layersep.metrics import lmse, metrics, ncc, psnr, ssim

rng = np.random.default_rng(0)
gt = rng.random((96, 128, 3)) * 0.8

# same content at 60% brightness: PSNR and SSIM drop, NCC and LMSE barely move
dim = 0.6 * gt
print(f"dimmed : psnr {psnr(dim, gt):6.2f}  ssim {ssim(dim, gt):.3f}  ncc {ncc(dim, gt):.3f}  lmse {lmse(dim, gt):.4f}")

noisy = np.clip(gt + rng.normal(0, 0.05, gt.shape), 0, 1)
print("noisy  :", metrics(noisy, gt))
print("rows   :", metrics(noisy, gt).rows("demo", "background")[:2])
