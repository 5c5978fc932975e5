"""Final-mask production: refinement, thresholding, and cleanup.

The cleanup chain is threshold -> drop small fragments -> morphological
opening (7x7) -> median blur (11x11). Morphology uses a square all-ones
structuring element with zero-padded borders; the median on a binary raster
is a majority filter over an edge-replicated window (odd window area, so no
ties). Fragments are 8-connected components; components with area strictly
below the threshold are cleared.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .bridge import (
    BackendDescriptor,
    BackendKind,
    ExternalBackendClient,
    decode_refined,
    encode_request,
)
from .errors import CapabilityError, ConfigError, ConsistencyError, NumericError
from .heatmap import RefinementInput
from .interp import round_half_up

EIGHT_CONNECTED = np.ones((3, 3), dtype=np.uint8)


@dataclass(frozen=True)
class BinaryMask:
    width: int
    height: int
    bits: np.ndarray  # uint8, strictly 0/1

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "BinaryMask":
        bits = (np.asarray(arr) > 0).astype(np.uint8)
        if bits.ndim != 2 or bits.size == 0:
            raise ConsistencyError(f"mask must be non-empty 2D, got shape {bits.shape}")
        return cls(width=bits.shape[1], height=bits.shape[0], bits=bits)


@dataclass(frozen=True)
class PostprocessConfig:
    threshold: float = 0.5
    min_fragment_area: int = 100  # pixels at refinement scale
    opening_kernel: int = 7
    median_kernel: int = 11

    def validate(self) -> None:
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError(f"threshold must be in (0,1), got {self.threshold}")
        for name in ("opening_kernel", "median_kernel"):
            k = getattr(self, name)
            if k < 1 or k % 2 == 0:
                raise ConfigError(f"{name} must be odd and >= 1, got {k}")
        if self.min_fragment_area < 0:
            raise ConfigError(f"min_fragment_area must be >= 0, got {self.min_fragment_area}")


def refine(
    ri: RefinementInput,
    backend: BackendDescriptor,
    client: ExternalBackendClient | None = None,
) -> np.ndarray:
    """Probability raster from the refinement backend; IDENTITY passes
    channel 3 (the stitched heatmap) through unchanged."""
    if ri.channels != 4:
        raise ConsistencyError(f"refinement input must have 4 channels, got {ri.channels}")
    if backend.kind is BackendKind.IDENTITY:
        return ri.data[:, :, 3].astype(np.float64)
    if backend.kind is not BackendKind.EXTERNAL_PROCESS:
        raise CapabilityError(f"{backend.kind} cannot refine")
    backend.validate()
    planar = np.moveaxis(ri.data, 2, 0)
    own = client is None
    cl = client or ExternalBackendClient(backend.command, backend.timeout_s)
    try:
        req = encode_request(cl.allocate_id(), "refine", planar)
        resp = cl.roundtrip([req])[req["id"]]
        return decode_refined(resp, ri.height, ri.width)
    finally:
        if own:
            cl.close()


def threshold_mask(raster: np.ndarray, t: float) -> BinaryMask:
    """bit = 1 iff value >= t (inclusive boundary)."""
    arr = np.asarray(raster, dtype=np.float64)
    if not np.isfinite(arr).all():
        raise NumericError("raster contains non-finite values")
    return BinaryMask.from_array(arr >= t)


def remove_small_fragments(mask: BinaryMask, min_area: int) -> BinaryMask:
    """Clear 8-connected components with area strictly below min_area."""
    labels, n = ndimage.label(mask.bits, structure=EIGHT_CONNECTED)
    if n == 0 or min_area <= 1:
        return mask
    areas = np.bincount(labels.ravel(), minlength=n + 1)
    keep = areas >= min_area
    keep[0] = False
    return BinaryMask.from_array(keep[labels])


def _window_counts(bits: np.ndarray, kernel: int, pad_mode: str) -> np.ndarray:
    """Count of set bits in each kernel x kernel window via an integral image."""
    r = kernel // 2
    padded = np.pad(bits.astype(np.int64), r, mode=pad_mode)
    ii = np.zeros((padded.shape[0] + 1, padded.shape[1] + 1), dtype=np.int64)
    np.cumsum(np.cumsum(padded, axis=0), axis=1, out=ii[1:, 1:])
    h, w = bits.shape
    return (
        ii[kernel : kernel + h, kernel : kernel + w]
        - ii[0:h, kernel : kernel + w]
        - ii[kernel : kernel + h, 0:w]
        + ii[0:h, 0:w]
    )


def erode(mask: BinaryMask, kernel: int) -> BinaryMask:
    counts = _window_counts(mask.bits, kernel, "constant")
    return BinaryMask.from_array(counts == kernel * kernel)


def dilate(mask: BinaryMask, kernel: int) -> BinaryMask:
    counts = _window_counts(mask.bits, kernel, "constant")
    return BinaryMask.from_array(counts > 0)


def morphological_open(mask: BinaryMask, kernel: int) -> BinaryMask:
    """Erosion then dilation, square all-ones element, zero-padded borders."""
    if kernel % 2 == 0:
        raise ConfigError(f"kernel must be odd, got {kernel}")
    return dilate(erode(mask, kernel), kernel)


def median_blur(mask: BinaryMask, kernel: int) -> BinaryMask:
    """Majority bit in each window, edge-replicated borders."""
    if kernel % 2 == 0:
        raise ConfigError(f"kernel must be odd, got {kernel}")
    counts = _window_counts(mask.bits, kernel, "edge")
    return BinaryMask.from_array(counts * 2 > kernel * kernel)


def postprocess(raster: np.ndarray, cfg: PostprocessConfig) -> BinaryMask:
    """threshold -> remove_small_fragments -> open -> median, in that order."""
    cfg.validate()
    mask = threshold_mask(raster, cfg.threshold)
    mask = remove_small_fragments(mask, cfg.min_fragment_area)
    mask = morphological_open(mask, cfg.opening_kernel)
    return median_blur(mask, cfg.median_kernel)


def upscale_mask_lattice_aligned(
    mask: BinaryMask,
    grid_cols: int,
    grid_rows: int,
    patch_size: int,
    out_w: int,
    out_h: int,
) -> BinaryMask:
    """Nearest-neighbor upscale of a refinement-scale mask to level-0 dims.

    The refinement raster was produced by align-corners resizing of the
    patch-lattice heatmap, so raster position u corresponds to lattice
    coordinate g = u * (cells - 1) / (T - 1) and lattice coordinate g sits at
    slide position (g + 0.5) * patch_size. This inverts that chain so the
    upscaled mask is registered to level-0 pixel centers.
    """
    t_h, t_w = mask.bits.shape

    def coords(n_out: int, cells: int, t: int) -> np.ndarray:
        g = (np.arange(n_out, dtype=np.float64) + 0.5) / patch_size - 0.5
        u = g * ((t - 1) / (cells - 1)) if cells > 1 else np.zeros(n_out)
        return np.clip(round_half_up(u), 0, t - 1).astype(np.int64)

    uy = coords(out_h, grid_rows, t_h)
    ux = coords(out_w, grid_cols, t_w)
    return BinaryMask.from_array(mask.bits[np.ix_(uy, ux)])


def overlay_tp_fp_fn(pred: BinaryMask, truth: BinaryMask) -> np.ndarray:
    """RGB comparison image: green = TP, white = FP, red = FN, black elsewhere."""
    if pred.bits.shape != truth.bits.shape:
        raise ConsistencyError(
            f"pred {pred.bits.shape} and truth {truth.bits.shape} dims differ"
        )
    p = pred.bits.astype(bool)
    t = truth.bits.astype(bool)
    out = np.zeros((pred.height, pred.width, 3), dtype=np.uint8)
    out[p & t] = (0, 200, 0)
    out[p & ~t] = (255, 255, 255)
    out[~p & t] = (220, 0, 0)
    return out
