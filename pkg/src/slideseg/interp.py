"""Pinned resampling primitives.

All resizing in the pipeline uses bilinear interpolation with the
align-corners mapping: output index u on an axis of length T samples the
source at

    x(u) = u * (S - 1) / (T - 1)      for T > 1
    x(u) = (S - 1) / 2                for T == 1

so the first and last samples coincide with the first and last source
pixels. Integer rasters round half up on the way back to uint8. The mapping
is fixed here (rather than delegated to an image library) so test oracles
can re-derive every output value from the formula.
"""

import numpy as np


def round_half_up(x: np.ndarray) -> np.ndarray:
    """Round to nearest integer, halves away from zero toward +inf."""
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5)


def _axis_coords(src: int, dst: int) -> np.ndarray:
    if dst == 1:
        return np.full(1, (src - 1) / 2.0)
    return np.arange(dst, dtype=np.float64) * (src - 1) / (dst - 1)


def bilinear_resize(raster: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of a 2D raster or HxWxC image, align-corners mapping.

    Returns float64. Callers quantize as needed.
    """
    arr = np.asarray(raster, dtype=np.float64)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[:, :, None]
    src_h, src_w = arr.shape[:2]
    ys = _axis_coords(src_h, out_h)
    xs = _axis_coords(src_w, out_w)
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, src_h - 1)
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, src_w - 1)
    y1 = np.minimum(y0 + 1, src_h - 1)
    x1 = np.minimum(x0 + 1, src_w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    top = arr[y0][:, x0] * (1 - wx) + arr[y0][:, x1] * wx
    bot = arr[y1][:, x0] * (1 - wx) + arr[y1][:, x1] * wx
    out = top * (1 - wy) + bot * wy
    return out[:, :, 0] if squeeze else out


def bilinear_resize_u8(raster: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize returning uint8, round half up."""
    out = bilinear_resize(raster, out_h, out_w)
    return np.clip(round_half_up(out), 0, 255).astype(np.uint8)
