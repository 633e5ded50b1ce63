"""
Warping, visibility and pyramids
================================

Backward warping pulls each output pixel from ``(x + u, y + v)`` in the
source. Samples that land outside the frame read zeros, and the visibility
mask records which pixels those are.
"""

import torch

from layersep import build_pyramid, visibility_mask, warp_bilinear
from layersep.synthgen import procedural_sequence

# a smooth 64x64 texture, as (N, C, H, W)
img = torch.from_numpy(procedural_sequence(0, 1, (64, 64))[0].transpose(2, 0, 1).copy())[None]

# shift right by 5.5 pixels: every output pixel reads 5.5 px to its right
flow = torch.zeros(1, 2, 64, 64, dtype=img.dtype)
flow[:, 0] = 5.5
shifted = warp_bilinear(img, flow)
mask = visibility_mask(flow)
print("visible columns:", int(mask[0, 0, 0].sum()), "of 64")

# column 58 reads x = 63.5, half inside; the last five read only padding
print("column 58 nonzero:", bool(shifted[..., 58].abs().sum() > 0))
print("last five columns:", float(shifted[..., -5:].abs().sum()))

# a pyramid is coarsest first; five levels above 6x10 reach the full 192x320
frames = torch.rand(3, 3, 192, 320)
for level, im in enumerate(build_pyramid(frames, 5)):
    print(f"level {level}: {tuple(im.shape[-2:])}")
