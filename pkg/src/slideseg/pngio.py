"""PNG readers/writers for the on-disk exchange formats.

Masks travel as 1-bit PNG, heatmaps as 16-bit grayscale PNG with
value = round(p * 65535), RGB rasters as plain 8-bit PNG. Writers are
deterministic: same array in, same bytes out.
"""

from pathlib import Path

import numpy as np
from PIL import Image

from .errors import InputError

# Low compression level: tiles are written in bulk and re-read often.
_COMPRESS = 1


def save_rgb_png(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype=np.uint8)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise InputError(f"expected HxWx3 uint8 array, got shape {arr.shape}")
    Image.fromarray(arr, mode="RGB").save(path, format="PNG", compress_level=_COMPRESS)


def load_rgb_png(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"no such file: {path}")
    with Image.open(path) as im:
        if im.mode != "RGB":
            raise InputError(f"expected RGB PNG, got mode {im.mode}: {path}")
        return np.asarray(im, dtype=np.uint8)


def save_mask_png(path, bits: np.ndarray) -> None:
    """Write a binary raster as 1-bit PNG (0 = background, 1 = foreground)."""
    bits = np.asarray(bits)
    Image.fromarray((bits > 0)).save(path, format="PNG", compress_level=_COMPRESS)


def load_mask_png(path) -> np.ndarray:
    """Read any grayscale/bilevel PNG as a strict 0/1 uint8 raster."""
    path = Path(path)
    if not path.is_file():
        raise InputError(f"no such file: {path}")
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return (arr > 127).astype(np.uint8)


def save_heatmap_png16(path, values: np.ndarray) -> None:
    """Persist probabilities in [0,1] as 16-bit grayscale, value=round(p*65535)."""
    v = np.asarray(values, dtype=np.float64)
    q = np.floor(v * 65535.0 + 0.5).astype(np.uint16)
    Image.fromarray(q).save(path, format="PNG", compress_level=_COMPRESS)


def load_heatmap_png16(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"no such file: {path}")
    with Image.open(path) as im:
        arr = np.asarray(im, dtype=np.uint16)
    return arr.astype(np.float64) / 65535.0
