"""Image preprocessing for tactile and vision rasters.

Rasters are float arrays shaped (H, W, 3). Everything here is a pure function
of its inputs and an explicitly passed ``numpy.random.Generator``.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage


@dataclass(frozen=True)
class NormStats:
    mean: tuple[float, float, float]
    std: tuple[float, float, float]

    def __post_init__(self):
        if len(self.mean) != 3 or len(self.std) != 3:
            raise ValueError("NormStats needs 3-vectors")
        if any(s <= 0 for s in self.std):
            raise ValueError("std entries must be strictly positive")


# Per-channel statistics of the released dataset.
TACTILE_STATS = NormStats((0.292, 0.297, 0.291), (0.188, 0.195, 0.219))
TACTILE_BGSUB_STATS = NormStats((-0.008, -0.019, -0.018), (0.045, 0.044, 0.053))
RGB_STATS = NormStats((0.481, 0.458, 0.408), (0.269, 0.261, 0.276))

BUILTIN_STATS = {
    "tactile": TACTILE_STATS,
    "tactile_bgsub": TACTILE_BGSUB_STATS,
    "rgb": RGB_STATS,
}


def load_norm_stats(path: str | os.PathLike) -> dict[str, NormStats]:
    """Read ``{"name": {"mean": [...], "std": [...]}}`` and merge over the builtins."""
    with Path(path).open(encoding="utf-8") as fh:
        raw = json.load(fh)
    stats = dict(BUILTIN_STATS)
    for name, entry in raw.items():
        stats[name] = NormStats(tuple(entry["mean"]), tuple(entry["std"]))
    return stats


def tactile_stats(background_subtracted: bool) -> NormStats:
    return TACTILE_BGSUB_STATS if background_subtracted else TACTILE_STATS


@dataclass(frozen=True)
class CropPolicy:
    kind: str = "center"
    output_side: int = 224

    def __post_init__(self):
        if self.kind not in ("center", "top"):
            raise ValueError(f"unknown crop kind {self.kind!r}")
        if self.output_side <= 0:
            raise ValueError("output_side must be positive")


def crop_policy_for(source: str, side: int) -> CropPolicy:
    """SSVTP frames use a centre crop; HCT frames are cropped from the top edge."""
    return CropPolicy("top" if source == "hct" else "center", side)


def _as_raster(image) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] == 0 or image.shape[1] == 0:
        raise ValueError(f"expected a nonempty (H, W, C) raster, got shape {image.shape}")
    return image


def pad_to_square(image) -> np.ndarray:
    """Zero-pad to a square of side max(H, W), keeping the content centred.

    When the padding is odd the extra row/column goes after the content.
    """
    image = _as_raster(image)
    h, w = image.shape[:2]
    side = max(h, w)
    top = (side - h) // 2
    left = (side - w) // 2
    out = np.zeros((side, side, image.shape[2]), dtype=image.dtype)
    out[top : top + h, left : left + w] = image
    return out


def subtract_background(tactile, background) -> np.ndarray:
    tactile = _as_raster(tactile)
    background = _as_raster(background)
    if tactile.shape != background.shape:
        raise ValueError(f"shape mismatch: {tactile.shape} vs {background.shape}")
    return tactile - background


def normalize(image, stats: NormStats) -> np.ndarray:
    image = _as_raster(image)
    return (image - np.asarray(stats.mean)) / np.asarray(stats.std)


def denormalize(image, stats: NormStats) -> np.ndarray:
    image = _as_raster(image)
    return image * np.asarray(stats.std) + np.asarray(stats.mean)


def apply_crop(image, policy: CropPolicy) -> np.ndarray:
    image = _as_raster(image)
    h, w = image.shape[:2]
    side = policy.output_side
    if h < side or w < side:
        raise ValueError(f"image {h}x{w} is smaller than crop side {side}")
    left = (w - side) // 2
    top = 0 if policy.kind == "top" else (h - side) // 2
    return image[top : top + side, left : left + side].copy()


def center_square_side(image) -> int:
    h, w = np.shape(image)[:2]
    return min(h, w)


def resize(image, side: int) -> np.ndarray:
    """Bilinear resize to ``side`` x ``side`` (half-pixel centres, no antialiasing)."""
    image = _as_raster(image)
    h, w = image.shape[:2]
    if (h, w) == (side, side):
        return image.copy()
    ys = np.clip((np.arange(side) + 0.5) * h / side - 0.5, 0, h - 1)
    xs = np.clip((np.arange(side) + 0.5) * w / side - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    top = image[y0][:, x0] * (1 - wx) + image[y0][:, x1] * wx
    bottom = image[y1][:, x0] * (1 - wx) + image[y1][:, x1] * wx
    return top * (1 - wy) + bottom * wy


def preprocess_tactile(
    image,
    side: int,
    background=None,
    stats: NormStats | None = None,
) -> np.ndarray:
    """Pad, optionally background-subtract, normalize and resize a tactile raster."""
    x = _as_raster(image)
    if background is not None:
        x = subtract_background(x, background)
    x = pad_to_square(x)
    if stats is None:
        stats = tactile_stats(background is not None)
    return resize(normalize(x, stats), side)


def preprocess_vision(image, source: str, side: int) -> np.ndarray:
    """Crop per source and resize; normalization is left to the caller (after augmentation)."""
    x = _as_raster(image)
    x = apply_crop(x, crop_policy_for(source, center_square_side(x)))
    return resize(x, side)


@dataclass(frozen=True)
class AugmentConfig:
    flip_p: float = 0.5
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    hue: float = 0.1
    jitter_p: float = 0.8
    grayscale_p: float = 0.2
    blur_p: float = 0.5
    blur_sigma: tuple[float, float] = field(default=(0.1, 2.0))


_LUMA = np.array([0.299, 0.587, 0.114])


def hflip(image) -> np.ndarray:
    return _as_raster(image)[:, ::-1].copy()


def to_grayscale(image) -> np.ndarray:
    image = _as_raster(image)
    gray = image @ _LUMA
    return np.repeat(gray[..., None], 3, axis=2)


def _rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = rgb.max(axis=-1)
    minc = rgb.min(axis=-1)
    delta = maxc - minc
    safe = np.where(delta > 0, delta, 1.0)
    h = np.where(
        maxc == r,
        ((g - b) / safe) % 6,
        np.where(maxc == g, (b - r) / safe + 2, (r - g) / safe + 4),
    )
    h = np.where(delta > 0, h / 6.0, 0.0)
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1.0), 0.0)
    return np.stack([h, s, maxc], axis=-1)


def _hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1 - s)
    q = v * (1 - s * f)
    t = v * (1 - s * (1 - f))
    i = i.astype(int) % 6
    choices_r = [v, q, p, p, t, v]
    choices_g = [t, v, v, q, p, p]
    choices_b = [p, p, t, v, v, q]
    r = np.choose(i, choices_r)
    g = np.choose(i, choices_g)
    b = np.choose(i, choices_b)
    return np.stack([r, g, b], axis=-1)


def color_jitter(image, rng: np.random.Generator, cfg: AugmentConfig) -> np.ndarray:
    """Brightness, contrast, saturation and hue jitter applied in a random order."""
    x = _as_raster(image)
    ops = []
    if cfg.brightness > 0:
        f = rng.uniform(1 - cfg.brightness, 1 + cfg.brightness)
        ops.append(lambda im, f=f: np.clip(im * f, 0, 1))
    if cfg.contrast > 0:
        f = rng.uniform(1 - cfg.contrast, 1 + cfg.contrast)
        ops.append(lambda im, f=f: np.clip((im - (im @ _LUMA).mean()) * f + (im @ _LUMA).mean(), 0, 1))
    if cfg.saturation > 0:
        f = rng.uniform(1 - cfg.saturation, 1 + cfg.saturation)
        ops.append(lambda im, f=f: np.clip((im - to_grayscale(im)) * f + to_grayscale(im), 0, 1))
    if cfg.hue > 0:
        shift = rng.uniform(-cfg.hue, cfg.hue)

        def _hue(im, shift=shift):
            hsv = _rgb_to_hsv(im)
            hsv[..., 0] = (hsv[..., 0] + shift) % 1.0
            return _hsv_to_rgb(hsv)

        ops.append(_hue)
    for k in rng.permutation(len(ops)):
        x = ops[k](x)
    return x


def gaussian_blur(image, sigma: float) -> np.ndarray:
    return ndimage.gaussian_filter(_as_raster(image), sigma=(sigma, sigma, 0), mode="reflect")


def augment_train(
    image,
    rng: np.random.Generator,
    cfg: AugmentConfig | None = None,
    *,
    force_flip: bool | None = None,
) -> np.ndarray:
    """Random flip, colour jitter, grayscale and blur for RGB training images in [0, 1].

    Every random decision is drawn from ``rng`` in a fixed order, so equal
    generator states give equal outputs. ``force_flip`` overrides the flip coin.
    """
    cfg = cfg or AugmentConfig()
    x = _as_raster(image)
    flip = rng.random() < cfg.flip_p
    if force_flip is not None:
        flip = force_flip
    if flip:
        x = hflip(x)
    if rng.random() < cfg.jitter_p:
        x = color_jitter(x, rng, cfg)
    if rng.random() < cfg.grayscale_p:
        x = to_grayscale(x)
    if rng.random() < cfg.blur_p:
        x = gaussian_blur(x, rng.uniform(*cfg.blur_sigma))
    return x
