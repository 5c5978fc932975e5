"""Patch augmentation: multi-lens distortion plus the standard transform set.

The lens warp applies a fixed number of local radial distortions. Each lens
has a center (cx, cy), a radius, and a signed strength (positive pulls
pixels toward the center like a barrel lens, negative pushes them out). For
every output pixel p the source position is

    r              = euclidean distance from p to the lens center
    scaling_factor = max(1 - r / radius, 0)
    source         = (p - center) * (1 - strength * scaling_factor) + center

per axis, clipped to the image bounds and sampled nearest-neighbor with
round-half-up. Lenses compose sequentially in list order, each reading the
image as left by the previous one. Pixels outside every lens disc map to
themselves, so the warp is local and the lens center is a fixed point.

All randomness comes from an explicit generator, so (seed, config, image)
fully determines the output regardless of scheduling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InputError, SizeError

DEFAULT_STRENGTH_RANGE = (0.2, 0.4)
DEFAULT_NUM_LENSES = 4
# Relative defaults when no absolute radius range is configured.
_REL_RADIUS_RANGE = (0.1, 0.3)


@dataclass(frozen=True)
class LensSpec:
    cx: float
    cy: float
    radius: float
    strength: float

    def validate(self) -> None:
        if self.radius <= 0:
            raise InputError(f"lens radius must be > 0, got {self.radius}")
        if not abs(self.strength) < 1:
            raise InputError(f"|strength| must be < 1, got {self.strength}")


@dataclass(frozen=True)
class AugmentConfig:
    num_lenses: int = DEFAULT_NUM_LENSES
    radius_range: tuple[float, float] | None = None  # pixels; None = (0.1, 0.3)*min(H,W)
    strength_range: tuple[float, float] = DEFAULT_STRENGTH_RANGE  # magnitudes
    enable_flip: bool = True
    enable_rot90: bool = True
    enable_contrast: bool = True
    contrast_range: tuple[float, float] = (0.8, 1.2)
    enable_hue: bool = True
    hue_degree_range: tuple[float, float] = (-18.0, 18.0)
    enable_brightness: bool = True
    brightness_range: tuple[float, float] = (-25.0, 25.0)
    enable_lens: bool = True
    crop_size: int = 224
    seed: int = 0

    def validate(self) -> None:
        if self.num_lenses < 0:
            raise ConfigError(f"num_lenses must be >= 0, got {self.num_lenses}")
        lo, hi = self.strength_range
        if not 0 <= lo <= hi < 1:
            raise ConfigError(f"strength_range must satisfy 0 <= lo <= hi < 1, got {self.strength_range}")
        if self.radius_range is not None:
            rlo, rhi = self.radius_range
            if not 0 < rlo <= rhi:
                raise ConfigError(f"radius_range must be well ordered and positive, got {self.radius_range}")
        for name in ("contrast_range", "hue_degree_range", "brightness_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"{name} is not well ordered: {(lo, hi)}")


def resolve_radius_range(config: AugmentConfig, image_dims: tuple[int, int]) -> tuple[float, float]:
    h, w = image_dims
    if config.radius_range is not None:
        return config.radius_range
    m = float(min(h, w))
    return (_REL_RADIUS_RANGE[0] * m, _REL_RADIUS_RANGE[1] * m)


def sample_lenses(
    config: AugmentConfig, image_dims: tuple[int, int], rng: np.random.Generator
) -> list[LensSpec]:
    """Draw num_lenses specs. Per lens, in order: radius, strength magnitude,
    sign, cx, cy. Centers are uniform integers in [0, dim - radius]."""
    config.validate()
    h, w = image_dims
    if h < 1 or w < 1:
        raise InputError(f"image dims must be >= 1, got {image_dims}")
    rlo, rhi = resolve_radius_range(config, image_dims)
    if rhi > min(h, w):
        raise ConfigError(
            f"radius_range ({rlo}, {rhi}) exceeds image dims {w}x{h}"
        )
    slo, shi = config.strength_range
    lenses = []
    for _ in range(config.num_lenses):
        radius = float(rng.uniform(rlo, rhi))
        magnitude = float(rng.uniform(slo, shi))
        sign = 1.0 if rng.integers(0, 2) == 0 else -1.0
        cx = int(rng.integers(0, int(w - radius) + 1))
        cy = int(rng.integers(0, int(h - radius) + 1))
        lenses.append(LensSpec(cx=cx, cy=cy, radius=radius, strength=sign * magnitude))
    return lenses


def lens_source_indices(
    shape: tuple[int, int], lens: LensSpec
) -> tuple[np.ndarray, np.ndarray, tuple[int, int, int, int]]:
    """Integer source coordinates for every pixel affected by one lens.

    Returns (src_y, src_x, window) where window = (y0, y1, x0, x1) bounds the
    lens disc; pixels outside it map to themselves exactly.
    """
    lens.validate()
    h, w = shape
    y0 = max(0, int(np.floor(lens.cy - lens.radius)))
    y1 = min(h, int(np.ceil(lens.cy + lens.radius)) + 1)
    x0 = max(0, int(np.floor(lens.cx - lens.radius)))
    x1 = min(w, int(np.ceil(lens.cx + lens.radius)) + 1)
    if y0 >= y1 or x0 >= x1:
        empty = np.zeros((0, 0), dtype=np.int64)
        return empty, empty, (y0, y0, x0, x0)
    yy, xx = np.meshgrid(
        np.arange(y0, y1, dtype=np.float64),
        np.arange(x0, x1, dtype=np.float64),
        indexing="ij",
    )
    r = np.hypot(xx - lens.cx, yy - lens.cy)
    scaling = np.maximum(1.0 - r / lens.radius, 0.0)
    factor = 1.0 - lens.strength * scaling
    sx = np.clip((xx - lens.cx) * factor + lens.cx, 0.0, w - 1.0)
    sy = np.clip((yy - lens.cy) * factor + lens.cy, 0.0, h - 1.0)
    return (
        np.floor(sy + 0.5).astype(np.int64),
        np.floor(sx + 0.5).astype(np.int64),
        (y0, y1, x0, x1),
    )


def apply_multi_lens_distortion(image: np.ndarray, lenses: list[LensSpec]) -> np.ndarray:
    """Apply the lens warps sequentially; output dims equal input dims."""
    out = np.asarray(image)
    if out.size == 0:
        raise InputError("image must be non-empty")
    out = out.copy()
    h, w = out.shape[:2]
    for lens in lenses:
        src_y, src_x, (y0, y1, x0, x1) = lens_source_indices((h, w), lens)
        if src_y.size == 0:
            continue
        out[y0:y1, x0:x1] = out[src_y, src_x]
    return out


def _quantize(arr: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(arr + 0.5), 0, 255).astype(np.uint8)


def adjust_contrast(image: np.ndarray, factor: float) -> np.ndarray:
    """Multiplicative contrast about mid-gray: c*(p-128)+128, clamped."""
    return _quantize(factor * (image.astype(np.float64) - 128.0) + 128.0)


def adjust_brightness(image: np.ndarray, delta: float) -> np.ndarray:
    return _quantize(image.astype(np.float64) + delta)


def _rgb_to_hsv(rgb: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = np.maximum(np.maximum(r, g), b)
    minc = np.minimum(np.minimum(r, g), b)
    v = maxc
    span = maxc - minc
    s = np.where(maxc > 0, span / np.where(maxc > 0, maxc, 1.0), 0.0)
    safe = np.where(span > 0, span, 1.0)
    rc = (maxc - r) / safe
    gc = (maxc - g) / safe
    bc = (maxc - b) / safe
    hh = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(span > 0, (hh / 6.0) % 1.0, 0.0)
    return h, s, v


def _hsv_to_rgb(h: np.ndarray, s: np.ndarray, v: np.ndarray) -> np.ndarray:
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(np.int64) % 6
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-1)


def rotate_hue(image: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate hue in HSV space, standard 8-bit conversion, round half up."""
    h, s, v = _rgb_to_hsv(image.astype(np.float64))
    h = (h + degrees / 360.0) % 1.0
    return _quantize(_hsv_to_rgb(h, s, v))


def augment_patch(
    image: np.ndarray, config: AugmentConfig, rng: np.random.Generator
) -> np.ndarray:
    """Full augmentation chain ending in a random crop_size x crop_size crop.

    Enabled stages draw from the stream in a fixed order (flips, rotation,
    contrast, hue, brightness, lenses, crop offsets); flips and color stages
    each fire on an independent coin flip.
    """
    config.validate()
    img = np.asarray(image, dtype=np.uint8)
    if img.ndim != 3 or img.shape[2] != 3:
        raise InputError(f"expected HxWx3 image, got shape {img.shape}")
    if img.shape[0] < config.crop_size or img.shape[1] < config.crop_size:
        raise SizeError(
            f"image {img.shape[1]}x{img.shape[0]} smaller than crop {config.crop_size}"
        )
    if config.enable_flip:
        if rng.integers(0, 2):
            img = img[:, ::-1]
        if rng.integers(0, 2):
            img = img[::-1, :]
    if config.enable_rot90:
        k = int(rng.integers(0, 4))
        if k:
            img = np.rot90(img, k=k, axes=(0, 1))
    if config.enable_contrast and rng.integers(0, 2):
        img = adjust_contrast(img, float(rng.uniform(*config.contrast_range)))
    if config.enable_hue and rng.integers(0, 2):
        img = rotate_hue(img, float(rng.uniform(*config.hue_degree_range)))
    if config.enable_brightness and rng.integers(0, 2):
        img = adjust_brightness(img, float(rng.uniform(*config.brightness_range)))
    if config.enable_lens and config.num_lenses > 0 and rng.integers(0, 2):
        lenses = sample_lenses(config, img.shape[:2], rng)
        img = apply_multi_lens_distortion(img, lenses)
    oy = int(rng.integers(0, img.shape[0] - config.crop_size + 1))
    ox = int(rng.integers(0, img.shape[1] - config.crop_size + 1))
    return np.ascontiguousarray(
        img[oy : oy + config.crop_size, ox : ox + config.crop_size]
    )


def draw_grid_overlay(image: np.ndarray, spacing: int = 16, value: int = 0) -> np.ndarray:
    """Burn grid lines into a copy of the image to visualize the warp."""
    out = np.asarray(image, dtype=np.uint8).copy()
    out[::spacing, :, :] = value
    out[:, ::spacing, :] = value
    return out
