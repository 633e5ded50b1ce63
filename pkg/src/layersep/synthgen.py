"""Seeded synthetic sequences for training and evaluation.

Images are float64 numpy arrays ``(H, W, C)`` in [0, 1]. Every random draw
comes from a named sub-stream of the sample seed, so adding a new
augmentation never shifts the draws of the existing ones. All sampled values
land in the sample manifest.
"""

from __future__ import annotations

import io
import json
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import cv2
import numpy as np
from PIL import Image

__all__ = [
    "TASKS",
    "LIMITS",
    "SynthSpec",
    "SynthSample",
    "stream",
    "random_homography_path",
    "generate_reflection_sample",
    "generate_obstruction_sample",
    "procedural_sequence",
    "procedural_fence",
    "read_image",
    "write_image",
    "read_frames_dir",
    "write_sample",
    "load_sample_dir",
    "with_seed",
]

TASKS = ("reflection", "fence", "raindrop")
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")

# outer bounds every configured range must sit inside
LIMITS = {
    "num_frames": (2, 7),
    "motion_range": (0, 40),
    "blur_kernel_range": (3, 17),
    "blur_sigma_range": (0.8, 2.9),
    "noise_sigma_range": (0.0, 0.02),
    "jpeg_quality_range": (50, 100),
    "vignette_kernel_range": (300, 1000),
    "attenuation_range": (0.0, 1.0),
}

HUE_SHIFT = 0.05
JITTER_SCALE = 0.2


@dataclass(frozen=True)
class SynthSpec:
    """Generation settings.

    ``num_frames=None`` draws the count per sample. Setting one of the
    corruption ranges to ``None`` switches that corruption off.
    ``homography_jitter`` bounds each corner perturbation as a fraction of the
    crop size; 0 gives identity homographies.
    """

    seed: int = 0
    num_frames: int | None = None
    crop: tuple = (320, 192)
    motion_range: int = 40
    blur_kernel_range: tuple = (3, 17)
    blur_sigma_range: tuple = (0.8, 2.9)
    noise_sigma_range: tuple | None = (0.0, 0.02)
    jpeg_quality_range: tuple | None = (50, 100)
    vignette_kernel_range: tuple | None = (300, 1000)
    attenuation_range: tuple = (0.6, 1.0)
    color_jitter: bool = True
    homography_jitter: float = 0.05
    task: str = "reflection"

    def validate(self):
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.num_frames is not None:
            lo, hi = LIMITS["num_frames"]
            if not lo <= self.num_frames <= hi:
                raise ValueError(f"num_frames {self.num_frames} outside [{lo}, {hi}]")
        lo, hi = LIMITS["motion_range"]
        if not lo <= self.motion_range <= hi:
            raise ValueError(f"motion_range {self.motion_range} outside [{lo}, {hi}]")
        for name in ("blur_kernel_range", "blur_sigma_range", "noise_sigma_range",
                     "jpeg_quality_range", "vignette_kernel_range", "attenuation_range"):
            rng = getattr(self, name)
            if rng is None:
                continue
            lo, hi = LIMITS[name]
            if len(rng) != 2 or rng[0] > rng[1] or rng[0] < lo or rng[1] > hi:
                raise ValueError(f"{name} {tuple(rng)} must be an ordered pair inside [{lo}, {hi}]")
        if any(k % 2 == 0 for k in self.blur_kernel_range):
            raise ValueError(f"blur kernel bounds must be odd, got {tuple(self.blur_kernel_range)}")
        w, h = self.crop
        if w < 2 or h < 2:
            raise ValueError(f"crop too small: {self.crop}")
        if not 0 <= self.homography_jitter < 0.5:
            raise ValueError(f"homography_jitter must lie in [0, 0.5), got {self.homography_jitter}")
        return self

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k, v in d.items():
            if isinstance(v, list):
                d[k] = tuple(v)
        return cls(**d)


@dataclass
class SynthSample:
    """A generated sequence.

    ``gt_obstruction`` is the attenuated blurred reflection for the reflection
    task and the premultiplied obstruction ``A * F`` otherwise, in which case
    ``gt_alpha`` holds the matte.
    """

    frames: np.ndarray
    gt_background: np.ndarray
    gt_obstruction: np.ndarray
    manifest: dict
    gt_alpha: np.ndarray | None = None
    clean_frames: np.ndarray | None = field(default=None, repr=False)

    @property
    def task(self):
        return self.manifest["spec"]["task"]

    def to_tensors(self, dtype=None):
        """Dict of ``(T, C, H, W)`` torch tensors in the layout the trainer consumes."""
        import torch

        dtype = dtype or torch.float32
        conv = lambda a: torch.from_numpy(np.ascontiguousarray(a.transpose(0, 3, 1, 2))).to(dtype)  # noqa: E731
        out = {"frames": conv(self.frames), "gt_b": conv(self.gt_background)}
        if self.gt_alpha is None:
            out["gt_r"] = conv(self.gt_obstruction)
        else:
            out["gt_a"] = conv(self.gt_alpha)
        return out


def stream(seed, name):
    """Independent generator for one named augmentation of one sample."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]))


def _as_hwc(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[..., None]
    if img.ndim != 3:
        raise ValueError(f"expected an (H, W) or (H, W, C) image, got shape {img.shape}")
    return img


def _uniform(rng, bounds):
    return float(rng.uniform(bounds[0], bounds[1]))


def random_homography_path(spec, rng, num_frames, source_size):
    """Per-frame homographies and crop offsets for one layer.

    ``source_size`` is ``(W, H)`` of the source frames. Corners are perturbed by
    at most ``homography_jitter * crop`` pixels; the crop offsets follow a
    clipped random walk whose integer steps never exceed ``motion_range``.
    Returns a list of ``(3x3 homography, (x, y) offset)`` pairs.
    """
    sw, sh = source_size
    cw, ch = spec.crop
    if sw < cw or sh < ch:
        raise ValueError(f"source {sw}x{sh} smaller than crop {cw}x{ch}")
    corners = np.float32([[0, 0], [sw - 1, 0], [sw - 1, sh - 1], [0, sh - 1]])
    span = np.array([cw, ch], dtype=np.float64) * spec.homography_jitter
    x = int(rng.integers(0, sw - cw + 1))
    y = int(rng.integers(0, sh - ch + 1))
    m = spec.motion_range
    path = []
    for t in range(num_frames):
        if spec.homography_jitter == 0:
            hom = np.eye(3)
        else:
            moved = corners + rng.uniform(-1, 1, size=(4, 2)) * span
            hom = cv2.getPerspectiveTransform(corners, moved.astype(np.float32))
        if t > 0:
            dx, dy = rng.integers(-m, m + 1, size=2)
            x = int(np.clip(x + dx, 0, sw - cw))
            y = int(np.clip(y + dy, 0, sh - ch))
        path.append((hom, (x, y)))
    return path


def _warp_and_crop(img, hom, offset, crop):
    x, y = offset
    cw, ch = crop
    if not np.array_equal(hom, np.eye(3)):
        h, w = img.shape[:2]
        img = cv2.warpPerspective(img, hom, (w, h), flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REFLECT)
        img = _as_hwc(img)
    return img[y:y + ch, x:x + cw]


def _draw_jitter(rng):
    return {
        "hue": _uniform(rng, (-HUE_SHIFT, HUE_SHIFT)),
        "saturation": _uniform(rng, (1 - JITTER_SCALE, 1 + JITTER_SCALE)),
        "brightness": _uniform(rng, (1 - JITTER_SCALE, 1 + JITTER_SCALE)),
        "contrast": _uniform(rng, (1 - JITTER_SCALE, 1 + JITTER_SCALE)),
    }


def _apply_jitter(img, p):
    if img.shape[-1] == 3:
        hsv = cv2.cvtColor(img.astype(np.float32), cv2.COLOR_RGB2HSV)
        hsv[..., 0] = np.mod(hsv[..., 0] + 360.0 * p["hue"], 360.0)
        hsv[..., 1] = np.clip(hsv[..., 1] * p["saturation"], 0, 1)
        img = cv2.cvtColor(hsv, cv2.COLOR_HSV2RGB).astype(np.float64)
    img = img * p["brightness"]
    img = (img - img.mean()) * p["contrast"] + img.mean()
    return np.clip(img, 0, 1)


def _layer_sequence(seed, name, spec, frames, num_frames, jitter):
    frames = [_as_hwc(f) for f in frames]
    if not frames:
        raise ValueError(f"{name}: empty source sequence")
    h, w = frames[0].shape[:2]
    if any(f.shape != frames[0].shape for f in frames):
        raise ValueError(f"{name}: source frames differ in size")
    path = random_homography_path(spec, stream(seed, f"path_{name}"), num_frames, (w, h))
    # reuse the last source frame when the source is shorter than the sample
    src_index = [min(t, len(frames) - 1) for t in range(num_frames)]
    out = []
    for t, (hom, off) in enumerate(path):
        img = frames[src_index[t]]
        if jitter is not None:
            img = _apply_jitter(img, jitter)
        out.append(_warp_and_crop(img, hom, off, spec.crop))
    record = {
        "source_index": src_index,
        "homographies": [hom.tolist() for hom, _ in path],
        "offsets": [list(off) for _, off in path],
    }
    return np.stack(out), record


def _vignette_mask(kernel, crop):
    cw, ch = crop
    kx = cv2.getGaussianKernel(cw, kernel)
    ky = cv2.getGaussianKernel(ch, kernel)
    mask = ky @ kx.T
    return (mask / mask.max())[..., None]


def _jpeg_roundtrip(img, quality):
    arr = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
    mode = "L" if arr.shape[-1] == 1 else "RGB"
    buf = io.BytesIO()
    Image.fromarray(arr[..., 0] if mode == "L" else arr, mode).save(buf, format="JPEG", quality=int(quality))
    buf.seek(0)
    out = np.asarray(Image.open(buf), dtype=np.float64) / 255.0
    return _as_hwc(out)


def _corrupt(seed, spec, clean):
    """Vignette, noise, then JPEG on every composited frame."""
    record = {}
    frames = clean.copy()
    if spec.vignette_kernel_range is not None:
        k = int(stream(seed, "vignette").integers(spec.vignette_kernel_range[0], spec.vignette_kernel_range[1] + 1))
        frames = frames * _vignette_mask(k, spec.crop)[None]
        record["vignette_kernel"] = k
    if spec.noise_sigma_range is not None:
        rng = stream(seed, "noise")
        sigma = _uniform(rng, spec.noise_sigma_range)
        frames = np.clip(frames + rng.normal(0.0, sigma, size=frames.shape), 0, 1)
        record["noise_sigma"] = sigma
    if spec.jpeg_quality_range is not None:
        q = int(stream(seed, "jpeg").integers(spec.jpeg_quality_range[0], spec.jpeg_quality_range[1] + 1))
        frames = np.stack([_jpeg_roundtrip(f, q) for f in frames])
        record["jpeg_quality"] = q
    return frames, record


def _frame_count(spec):
    if spec.num_frames is not None:
        return spec.num_frames
    lo, hi = LIMITS["num_frames"]
    return int(stream(spec.seed, "num_frames").integers(lo, hi + 1))


def _jitters(spec, names):
    if not spec.color_jitter:
        return {n: None for n in names}
    return {n: _draw_jitter(stream(spec.seed, f"jitter_{n}")) for n in names}


def generate_reflection_sample(spec, bg_frames, rf_frames):
    """Blend a background sequence with a blurred, attenuated reflection sequence.

    Before corruption each frame is ``clip(B + kappa * blur(R))``; the ground
    truth layers are ``B`` and ``kappa * blur(R)``.
    """
    spec.validate()
    if spec.task != "reflection":
        raise ValueError(f"reflection sample requested with task {spec.task!r}")
    seed = spec.seed
    t = _frame_count(spec)
    jit = _jitters(spec, ("background", "reflection"))
    b, rec_b = _layer_sequence(seed, "background", spec, bg_frames, t, jit["background"])
    r, rec_r = _layer_sequence(seed, "reflection", spec, rf_frames, t, jit["reflection"])
    if b.shape[-1] != r.shape[-1]:
        raise ValueError(f"background has {b.shape[-1]} channels, reflection {r.shape[-1]}")

    rng = stream(seed, "blur")
    lo, hi = spec.blur_kernel_range
    kernel = int(2 * rng.integers(lo // 2, hi // 2 + 1) + 1)
    sigma = _uniform(rng, spec.blur_sigma_range)
    kappa = _uniform(stream(seed, "attenuation"), spec.attenuation_range)
    r_blur = np.stack([_as_hwc(cv2.GaussianBlur(f, (kernel, kernel), sigma, borderType=cv2.BORDER_REFLECT)) for f in r])
    r_prime = kappa * r_blur
    clean = np.clip(b + r_prime, 0, 1)
    frames, rec_c = _corrupt(seed, spec, clean)

    manifest = {
        "seed": seed,
        "spec": spec.to_dict(),
        "num_frames": t,
        "color_jitter": jit,
        "background": rec_b,
        "reflection": rec_r,
        "blur_kernel": kernel,
        "blur_sigma": sigma,
        "attenuation": kappa,
        "blend_model": "clip(B + attenuation * gaussian_blur(R)); attenuation is a stand-in coefficient",
        "corruption": rec_c,
    }
    return SynthSample(frames, b, r_prime, manifest, clean_frames=clean)


def generate_obstruction_sample(spec, bg_frames, obstruction, alpha):
    """Composite ``A * F + (1 - A) * B`` with independent motion for each plane."""
    spec.validate()
    if spec.task not in ("fence", "raindrop"):
        raise ValueError(f"obstruction sample needs task fence or raindrop, got {spec.task!r}")
    obstruction = _as_hwc(obstruction)
    alpha = _as_hwc(alpha)
    if obstruction.shape[:2] != alpha.shape[:2] or alpha.shape[-1] != 1:
        raise ValueError(f"obstruction {obstruction.shape} and alpha {alpha.shape} do not match")
    if alpha.min() < 0 or alpha.max() > 1:
        raise ValueError("alpha values outside [0, 1]")
    seed = spec.seed
    t = _frame_count(spec)
    jit = _jitters(spec, ("background", "obstruction"))
    b, rec_b = _layer_sequence(seed, "background", spec, bg_frames, t, jit["background"])
    if b.shape[-1] != obstruction.shape[-1]:
        raise ValueError(f"background has {b.shape[-1]} channels, obstruction {obstruction.shape[-1]}")
    if jit["obstruction"] is not None:
        obstruction = _apply_jitter(obstruction, jit["obstruction"])
    # colour and matte travel together through one warp
    plane = np.concatenate([obstruction, alpha], axis=-1)
    moved, rec_o = _layer_sequence(seed, "obstruction", spec, [plane], t, None)
    f = moved[..., :-1]
    a = np.clip(moved[..., -1:], 0, 1)
    clean = a * f + (1 - a) * b
    frames, rec_c = _corrupt(seed, spec, clean)
    manifest = {
        "seed": seed,
        "spec": spec.to_dict(),
        "num_frames": t,
        "color_jitter": jit,
        "background": rec_b,
        "obstruction": rec_o,
        "corruption": rec_c,
    }
    return SynthSample(frames, b, a * f, manifest, gt_alpha=a, clean_frames=clean)


def procedural_sequence(seed, num_frames, size, channels=3, drift=(3, 2)):
    """Smooth random texture drifting by ``drift`` pixels per frame.

    Stands in for a real video source when none is at hand. ``size`` is
    ``(W, H)`` of each returned frame.
    """
    w, h = size
    rng = stream(seed, "procedural")
    pad = 2 * max(abs(drift[0]), abs(drift[1])) * num_frames + 8
    big = np.zeros((h + pad, w + pad, channels))
    for scale in (2.0, 6.0, 16.0):
        noise = rng.random((h + pad, w + pad, channels))
        big += _as_hwc(cv2.GaussianBlur(noise, (0, 0), scale)) * scale
    big -= big.min()
    big /= big.max()
    cx, cy = pad // 2, pad // 2
    return [big[cy + t * drift[1]:cy + t * drift[1] + h, cx + t * drift[0]:cx + t * drift[0] + w].copy()
            for t in range(num_frames)]


def procedural_fence(size, spacing=16, width=3, channels=3, colour=0.6):
    """Diagonal wire fence: returns ``(obstruction, alpha)`` with a soft-edged matte."""
    w, h = size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    d1 = np.abs(((xx + yy) % spacing) - spacing / 2)
    d2 = np.abs(((xx - yy) % spacing) - spacing / 2)
    dist = np.minimum(d1, d2)
    alpha = np.clip(1.0 - np.clip(dist - width / 2, 0, 1), 0, 1)
    obstruction = np.full((h, w, channels), colour)
    return obstruction, alpha[..., None]


def read_image(path):
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        arr = np.asarray(im, dtype=np.float64) / 255.0
    return _as_hwc(arr)


def write_image(path, img):
    arr = np.round(np.clip(_as_hwc(img), 0, 1) * 255).astype(np.uint8)
    Image.fromarray(arr[..., 0] if arr.shape[-1] == 1 else arr).save(path, format="PNG")


def read_frames_dir(path):
    """Lexicographically ordered PNG/JPEG frames of a directory."""
    path = Path(path)
    if not path.is_dir():
        raise FileNotFoundError(f"frame directory not found: {path}")
    files = sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise ValueError(f"no PNG/JPEG frames in {path}")
    return [read_image(p) for p in files]


def _dump(obj, path):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_sample(sample, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    obstruction_prefix = "gt_r" if sample.gt_alpha is None else "gt_f"
    for t in range(len(sample.frames)):
        write_image(out / f"frame_{t:03d}.png", sample.frames[t])
        write_image(out / f"gt_b_{t:03d}.png", sample.gt_background[t])
        write_image(out / f"{obstruction_prefix}_{t:03d}.png", sample.gt_obstruction[t])
        if sample.gt_alpha is not None:
            write_image(out / f"gt_a_{t:03d}.png", sample.gt_alpha[t])
    _dump(sample.manifest, out / "manifest.json")
    return out


def load_sample_dir(path, dtype=None):
    """Read a written sample (or a bare frame directory) into trainer tensors.

    GT entries appear only when the matching files exist, which is how real
    sequences without ground truth are told apart from synthetic ones.
    """
    import torch

    dtype = dtype or torch.float32
    path = Path(path)
    groups = {}
    for p in sorted(path.iterdir()):
        if p.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        for key, prefix in (("gt_b", "gt_b_"), ("gt_r", "gt_r_"), ("gt_a", "gt_a_"), ("gt_f", "gt_f_")):
            if p.name.startswith(prefix):
                groups.setdefault(key, []).append(p)
                break
        else:
            groups.setdefault("frames", []).append(p)
    if "frames" not in groups:
        raise ValueError(f"no input frames in {path}")
    out = {}
    for key, files in groups.items():
        arr = np.stack([read_image(p) for p in files])
        out[key] = torch.from_numpy(arr.transpose(0, 3, 1, 2).copy()).to(dtype)
    out.pop("gt_f", None)
    return out


def with_seed(spec, seed):
    return replace(spec, seed=int(seed))
