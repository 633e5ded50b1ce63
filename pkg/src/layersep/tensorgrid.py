"""Pyramid and warping primitives on ``(N, C, H, W)`` tensors.

Flow fields are ``(N, 2, H, W)`` tensors holding per-pixel displacements in
pixels, channel 0 horizontal (``u``, positive to the right) and channel 1
vertical (``v``, positive downwards). Warping is backward sampling::

    warp_bilinear(I, V)(p) = I(p + V(p))

so a field ``V_{j->k}`` with ``warp_bilinear(I_j, V_{j->k}) ~ I_k`` registers
frame ``j`` onto frame ``k``.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F

__all__ = [
    "warp_bilinear",
    "visibility_mask",
    "upsample_flow_2x",
    "downsample_2x",
    "downsample_flow",
    "build_pyramid",
    "spatial_gradient",
]


def _as_4d(x: torch.Tensor, name: str) -> tuple[torch.Tensor, bool]:
    if x.dim() == 3:
        return x.unsqueeze(0), True
    if x.dim() != 4:
        raise ValueError(f"{name} must be (C, H, W) or (N, C, H, W), got shape {tuple(x.shape)}")
    return x, False


def _sampling_coords(flow: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    _, _, h, w = flow.shape
    xs = torch.arange(w, dtype=flow.dtype, device=flow.device).view(1, 1, w)
    ys = torch.arange(h, dtype=flow.dtype, device=flow.device).view(1, h, 1)
    return xs + flow[:, 0], ys + flow[:, 1]


def warp_bilinear(image: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Backward-warp ``image`` by ``flow`` with bilinear sampling.

    Samples that fall outside the image read zeros; use :func:`visibility_mask`
    to find the pixels affected. Differentiable in both arguments. A flow with
    batch size 1 is broadcast over the image batch.
    """
    image, squeeze = _as_4d(image, "image")
    flow, _ = _as_4d(flow, "flow")
    if flow.shape[1] != 2:
        raise ValueError(f"flow must have 2 channels, got {flow.shape[1]}")
    if image.shape[-2:] != flow.shape[-2:]:
        raise ValueError(
            f"image and flow spatial sizes differ: {tuple(image.shape[-2:])} vs {tuple(flow.shape[-2:])}"
        )
    n, c, h, w = image.shape
    if flow.shape[0] != n:
        if flow.shape[0] != 1:
            raise ValueError(f"batch mismatch: image {n}, flow {flow.shape[0]}")
        flow = flow.expand(n, -1, -1, -1)

    px, py = _sampling_coords(flow)
    x0 = torch.floor(px)
    y0 = torch.floor(py)
    wx1 = px - x0
    wy1 = py - y0
    wx0 = 1 - wx1
    wy0 = 1 - wy1
    x0 = x0.long()
    y0 = y0.long()

    flat = image.reshape(n, c, h * w)
    out = image.new_zeros(n, c, h, w)
    for dy, wy in ((0, wy0), (1, wy1)):
        for dx, wx in ((0, wx0), (1, wx1)):
            xi = x0 + dx
            yi = y0 + dy
            valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            idx = (yi.clamp(0, h - 1) * w + xi.clamp(0, w - 1)).view(n, 1, h * w).expand(n, c, h * w)
            vals = torch.gather(flat, 2, idx).view(n, c, h, w)
            weight = (wx * wy * valid).unsqueeze(1)
            out = out + weight * vals
    return out.squeeze(0) if squeeze else out


def visibility_mask(flow: torch.Tensor) -> torch.Tensor:
    """Binary ``(N, 1, H, W)`` mask: 1 where ``p + flow(p)`` stays inside the image grid."""
    flow, squeeze = _as_4d(flow, "flow")
    _, _, h, w = flow.shape
    px, py = _sampling_coords(flow)
    inside = (px >= 0) & (px <= w - 1) & (py >= 0) & (py <= h - 1)
    mask = inside.to(flow.dtype).unsqueeze(1)
    return mask.squeeze(0) if squeeze else mask


def upsample_flow_2x(flow: torch.Tensor, size: tuple[int, int] | None = None) -> torch.Tensor:
    """Bilinearly upsample a flow field and rescale its displacements.

    ``size`` defaults to twice the input size; an explicit size is used when
    the finer pyramid level has odd dimensions.
    """
    flow, squeeze = _as_4d(flow, "flow")
    h, w = flow.shape[-2:]
    if size is None:
        size = (2 * h, 2 * w)
    up = F.interpolate(flow, size=size, mode="bilinear", align_corners=False)
    scale = torch.tensor([size[1] / w, size[0] / h], dtype=flow.dtype, device=flow.device)
    up = up * scale.view(1, 2, 1, 1)
    return up.squeeze(0) if squeeze else up


def downsample_2x(image: torch.Tensor) -> torch.Tensor:
    """Halve both dimensions (odd sizes round down).

    For an exact factor of two, bilinear sampling at the output pixel centres
    lands midway between input pixels, which is the 2x2 block mean.
    """
    image, squeeze = _as_4d(image, "image")
    if min(image.shape[-2:]) < 2:
        raise ValueError(f"cannot downsample an image of size {tuple(image.shape[-2:])}")
    out = F.avg_pool2d(image, kernel_size=2, stride=2)
    return out.squeeze(0) if squeeze else out


def downsample_flow(flow: torch.Tensor, factor: int) -> torch.Tensor:
    """Downsample a flow spatially by ``factor`` (a power of two) and divide its values by it."""
    if factor < 1 or factor & (factor - 1):
        raise ValueError(f"factor must be a power of two, got {factor}")
    out = flow
    f = factor
    while f > 1:
        out = downsample_2x(out)
        f //= 2
    return out / factor


def build_pyramid(image: torch.Tensor, levels: int) -> list[torch.Tensor]:
    """Return ``levels + 1`` images, coarsest first; entry ``levels`` is the input itself."""
    if levels < 1:
        raise ValueError(f"levels must be >= 1, got {levels}")
    h, w = image.shape[-2:]
    if min(h, w) < 2**levels:
        raise ValueError(f"image of size {h}x{w} is too small for a {levels}-level pyramid (needs >= {2**levels})")
    pyr = [image]
    for _ in range(levels):
        pyr.append(downsample_2x(pyr[-1]))
    return pyr[::-1]


def spatial_gradient(image: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Forward differences along x and y; the last column / row is zero."""
    gx = F.pad(image[..., :, 1:] - image[..., :, :-1], (0, 1, 0, 0))
    gy = F.pad(image[..., 1:, :] - image[..., :-1, :], (0, 0, 0, 1))
    return gx, gy
