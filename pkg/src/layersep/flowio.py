"""Middlebury ``.flo`` reader and writer."""

from __future__ import annotations

import os

import numpy as np

TAG_FLOAT = 202021.25


class FloFormatError(ValueError):
    pass


def write_flo(path: str | os.PathLike, flow: np.ndarray) -> None:
    """Write an ``(H, W, 2)`` array of ``(u, v)`` displacements."""
    flow = np.asarray(flow, dtype=np.float32)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ValueError(f"flow must be (H, W, 2), got {flow.shape}")
    h, w = flow.shape[:2]
    with open(path, "wb") as f:
        np.array([TAG_FLOAT], dtype="<f4").tofile(f)
        np.array([w, h], dtype="<i4").tofile(f)
        flow.astype("<f4").tofile(f)


def read_flo(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 12:
        raise FloFormatError(f"{path}: truncated header ({len(data)} bytes)")
    magic = np.frombuffer(data, dtype="<f4", count=1)[0]
    if magic != np.float32(TAG_FLOAT):
        raise FloFormatError(f"{path}: bad magic {magic!r}, expected {TAG_FLOAT}")
    w, h = np.frombuffer(data, dtype="<i4", count=2, offset=4)
    if w < 0 or h < 0:
        raise FloFormatError(f"{path}: negative dimensions {w}x{h}")
    expected = 12 + 4 * 2 * int(w) * int(h)
    if len(data) != expected:
        raise FloFormatError(f"{path}: expected {expected} bytes for {w}x{h}, found {len(data)}")
    return np.frombuffer(data, dtype="<f4", offset=12).reshape(int(h), int(w), 2).astype(np.float32)
