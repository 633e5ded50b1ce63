"""Multi-frame obstruction removal by coarse-to-fine layered decomposition."""

from layersep.tensorgrid import (
    build_pyramid,
    downsample_2x,
    downsample_flow,
    spatial_gradient,
    upsample_flow_2x,
    visibility_mask,
    warp_bilinear,
)

__version__ = "0.1.0"

__all__ = [
    "build_pyramid",
    "downsample_2x",
    "downsample_flow",
    "spatial_gradient",
    "upsample_flow_2x",
    "visibility_mask",
    "warp_bilinear",
]
