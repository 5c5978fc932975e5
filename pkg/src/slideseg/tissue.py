"""Tissue/glass separation and the patch lattice.

Tissue is whatever the color-gradient or darkness rule fires on; the patch
lattice is non-overlapping with stride = patch size, and every patch gets a
label from the eligibility rules:

* tissue_fraction <= 0.25           -> GLASS_EXCLUDED (strict "more than 25%")
* eligible, tumor_fraction >= 0.05  -> TUMOR (inclusive "minimum of 5%")
* eligible, tumor_fraction == 0     -> NON_TUMOR
* eligible, 0 < fraction < 0.05     -> AMBIGUOUS_EXCLUDED
* eligible, no ground truth given   -> ELIGIBLE

Edge patches participate with their true (smaller) footprint; fractions are
exact area ratios even when the mask lives at a different pyramid level than
the grid (rational box coverage over the mask raster).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import BoundsError, ConsistencyError, InputError
from .slide import Region, TiledSlide, read_level, read_region

LUMA_WEIGHTS = (0.299, 0.587, 0.114)
# Max Sobel response on an 8-bit image: |gx|,|gy| <= 4*255, magnitude <= that * sqrt(2).
_SOBEL_NORM = 4.0 * 255.0 * np.sqrt(2.0)

DEFAULT_GRADIENT_THRESHOLD = 0.02
DEFAULT_BRIGHTNESS_CEILING = 0.95


class PatchLabel(Enum):
    GLASS_EXCLUDED = "GLASS_EXCLUDED"
    NON_TUMOR = "NON_TUMOR"
    TUMOR = "TUMOR"
    AMBIGUOUS_EXCLUDED = "AMBIGUOUS_EXCLUDED"
    ELIGIBLE = "ELIGIBLE"  # tissue patch with no ground truth attached

    @property
    def is_eligible(self) -> bool:
        return self is not PatchLabel.GLASS_EXCLUDED


@dataclass(frozen=True)
class TissueMask:
    level: int
    width: int
    height: int
    bits: np.ndarray  # uint8 raster, strictly 0/1

    def __post_init__(self):
        if self.bits.shape != (self.height, self.width):
            raise ConsistencyError(
                f"mask bits shape {self.bits.shape} != {self.height}x{self.width}"
            )


@dataclass(frozen=True)
class PatchRecord:
    grid_x: int
    grid_y: int
    level: int
    origin_x: int
    origin_y: int
    patch_size: int
    tissue_fraction: float
    tumor_fraction: float | None
    label: PatchLabel


@dataclass(frozen=True)
class PatchGrid:
    slide_id: str
    level: int
    patch_size: int
    cols: int
    rows: int
    records: tuple[PatchRecord, ...]  # dense, row-major

    def record_at(self, grid_x: int, grid_y: int) -> PatchRecord:
        if not (0 <= grid_x < self.cols and 0 <= grid_y < self.rows):
            raise BoundsError(f"grid index ({grid_x},{grid_y}) outside {self.cols}x{self.rows}")
        return self.records[grid_y * self.cols + grid_x]

    def eligible_records(self) -> list[PatchRecord]:
        return [r for r in self.records if r.label.is_eligible]


def luminance(rgb: np.ndarray) -> np.ndarray:
    """Rec.601 luma of an HxWx3 uint8 block, float64 in [0, 255]."""
    r, g, b = LUMA_WEIGHTS
    arr = np.asarray(rgb, dtype=np.float64)
    return r * arr[:, :, 0] + g * arr[:, :, 1] + b * arr[:, :, 2]


def _sobel_magnitude(lum: np.ndarray) -> np.ndarray:
    p = np.pad(lum, 1, mode="edge")
    gx = (
        (p[:-2, 2:] + 2 * p[1:-1, 2:] + p[2:, 2:])
        - (p[:-2, :-2] + 2 * p[1:-1, :-2] + p[2:, :-2])
    )
    gy = (
        (p[2:, :-2] + 2 * p[2:, 1:-1] + p[2:, 2:])
        - (p[:-2, :-2] + 2 * p[:-2, 1:-1] + p[:-2, 2:])
    )
    return np.hypot(gx, gy)


def _mean3(arr: np.ndarray) -> np.ndarray:
    p = np.pad(arr, 1, mode="edge")
    acc = np.zeros_like(arr)
    for dy in range(3):
        for dx in range(3):
            acc += p[dy : dy + arr.shape[0], dx : dx + arr.shape[1]]
    return acc / 9.0


def tissue_mask_from_rgb(
    rgb: np.ndarray,
    level: int,
    gradient_threshold: float = DEFAULT_GRADIENT_THRESHOLD,
    brightness_ceiling: float = DEFAULT_BRIGHTNESS_CEILING,
) -> TissueMask:
    """Tissue rule on a raster already in memory (see compute_tissue_mask)."""
    if not 0.0 < gradient_threshold < 1.0:
        raise InputError(f"gradient_threshold must be in (0,1), got {gradient_threshold}")
    if not 0.0 < brightness_ceiling < 1.0:
        raise InputError(f"brightness_ceiling must be in (0,1), got {brightness_ceiling}")
    lum = luminance(rgb)
    grad = _mean3(_sobel_magnitude(lum) / _SOBEL_NORM)
    bits = ((grad > gradient_threshold) | (lum < brightness_ceiling * 255.0)).astype(np.uint8)
    return TissueMask(level=level, width=rgb.shape[1], height=rgb.shape[0], bits=bits)


def compute_tissue_mask(
    slide: TiledSlide,
    mask_level: int,
    gradient_threshold: float = DEFAULT_GRADIENT_THRESHOLD,
    brightness_ceiling: float = DEFAULT_BRIGHTNESS_CEILING,
) -> TissueMask:
    """Separate tissue from background glass at the given pyramid level.

    A pixel is tissue iff the 3x3-mean-smoothed, [0,1]-normalized Sobel
    magnitude of its luminance exceeds ``gradient_threshold``, or its
    luminance lies below ``brightness_ceiling * 255``.
    """
    rgb = read_level(slide, mask_level)  # raises BoundsError for bad level
    return tissue_mask_from_rgb(rgb, mask_level, gradient_threshold, brightness_ceiling)


def default_mask_level(slide: TiledSlide) -> int:
    """Existing pyramid level closest to 1/32 of level-0 resolution."""
    return min(slide.levels, key=lambda d: abs(d.downsample_factor - 32)).level


def _integral(bits: np.ndarray) -> np.ndarray:
    ii = np.zeros((bits.shape[0] + 1, bits.shape[1] + 1), dtype=np.float64)
    np.cumsum(np.cumsum(bits, axis=0, dtype=np.float64), axis=1, out=ii[1:, 1:])
    return ii


def _interp_axis(ii: np.ndarray, coords: np.ndarray, axis: int) -> np.ndarray:
    """Linear interpolation of an integral image along one axis.

    Exact for box sums: the integral of a piecewise-constant raster is
    piecewise bilinear, so sampling it at fractional coordinates by linear
    interpolation reproduces the true fractional-coverage sum.
    """
    n = ii.shape[axis] - 1
    c = np.clip(coords, 0.0, n)
    lo = np.floor(c).astype(np.int64)
    lo = np.minimum(lo, n - 1) if n > 0 else lo
    w = c - lo
    a = np.take(ii, lo, axis=axis)
    b = np.take(ii, lo + 1, axis=axis) if n > 0 else a
    shape = [1] * ii.ndim
    shape[axis] = len(coords)
    w = w.reshape(shape)
    return a * (1 - w) + b * w


def fractional_box_sums(bits: np.ndarray, x_bounds: np.ndarray, y_bounds: np.ndarray) -> np.ndarray:
    """Mask area inside every [x_i, x_{i+1}) x [y_j, y_{j+1}) box.

    ``x_bounds``/``y_bounds`` are fractional pixel coordinates over the mask
    raster; returns an array of shape (len(y_bounds)-1, len(x_bounds)-1).
    """
    ii = _integral(bits)
    sampled = _interp_axis(_interp_axis(ii, np.asarray(y_bounds, np.float64), 0),
                           np.asarray(x_bounds, np.float64), 1)
    return np.diff(np.diff(sampled, axis=0), axis=1)


def _grid_bounds(n_level: int, patch_size: int, cells: int, scale: float) -> np.ndarray:
    edges = np.arange(cells + 1, dtype=np.float64) * patch_size
    edges = np.minimum(edges, n_level)  # edge patches keep their true footprint
    return edges * scale


def build_patch_grid(
    slide: TiledSlide,
    level: int,
    patch_size: int,
    tissue: TissueMask,
    truth: TissueMask | None = None,
) -> PatchGrid:
    """Lay the non-overlapping patch lattice and label every cell."""
    if patch_size < 8:
        raise InputError(f"patch_size must be >= 8, got {patch_size}")
    desc = slide.level_desc(level)
    cols = -(-desc.width // patch_size)
    rows = -(-desc.height // patch_size)

    def cell_fractions(mask: TissueMask) -> np.ndarray:
        m_desc = slide.level_desc(mask.level)
        if (mask.width, mask.height) != (m_desc.width, m_desc.height):
            raise ConsistencyError(
                f"mask dims {mask.width}x{mask.height} do not match level "
                f"{mask.level} ({m_desc.width}x{m_desc.height})"
            )
        scale = desc.downsample_factor / m_desc.downsample_factor
        xb = _grid_bounds(desc.width, patch_size, cols, scale)
        yb = _grid_bounds(desc.height, patch_size, rows, scale)
        areas = np.outer(np.diff(yb), np.diff(xb))
        sums = fractional_box_sums(mask.bits, xb, yb)
        return np.clip(sums / areas, 0.0, 1.0)

    tissue_frac = cell_fractions(tissue)
    tumor_frac = cell_fractions(truth) if truth is not None else None

    records = []
    for gy in range(rows):
        for gx in range(cols):
            tf = float(tissue_frac[gy, gx])
            uf = float(tumor_frac[gy, gx]) if tumor_frac is not None else None
            if tf <= 0.25:
                label = PatchLabel.GLASS_EXCLUDED
            elif uf is None:
                label = PatchLabel.ELIGIBLE
            elif uf >= 0.05:
                label = PatchLabel.TUMOR
            elif uf == 0.0:
                label = PatchLabel.NON_TUMOR
            else:
                label = PatchLabel.AMBIGUOUS_EXCLUDED
            records.append(
                PatchRecord(
                    grid_x=gx,
                    grid_y=gy,
                    level=level,
                    origin_x=gx * patch_size,
                    origin_y=gy * patch_size,
                    patch_size=patch_size,
                    tissue_fraction=tf,
                    tumor_fraction=uf,
                    label=label,
                )
            )
    return PatchGrid(
        slide_id=slide.slide_id,
        level=level,
        patch_size=patch_size,
        cols=cols,
        rows=rows,
        records=tuple(records),
    )


def extract_patch(slide: TiledSlide, record: PatchRecord, out_size: int = 224) -> np.ndarray:
    """Pixel block under a patch record, zero-padded to out_size on right/bottom."""
    try:
        desc = slide.level_desc(record.level)
    except BoundsError as exc:
        raise ConsistencyError(f"record level {record.level} not in slide") from exc
    if record.origin_x >= desc.width or record.origin_y >= desc.height:
        raise ConsistencyError(
            f"record origin ({record.origin_x},{record.origin_y}) outside level "
            f"{record.level} of slide {slide.slide_id}"
        )
    w = min(record.patch_size, desc.width - record.origin_x, out_size)
    h = min(record.patch_size, desc.height - record.origin_y, out_size)
    block = read_region(slide, Region(record.level, record.origin_x, record.origin_y, w, h))
    out = np.zeros((out_size, out_size, 3), dtype=np.uint8)
    out[:h, :w] = block
    return out


def save_grid(grid: PatchGrid, csv_path, json_path) -> None:
    """PatchGrid -> CSV of records plus a JSON header."""
    with open(json_path, "w") as f:
        json.dump(
            {
                "slide_id": grid.slide_id,
                "level": grid.level,
                "patch_size": grid.patch_size,
                "cols": grid.cols,
                "rows": grid.rows,
            },
            f,
            indent=2,
            sort_keys=True,
        )
        f.write("\n")
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(
            [
                "grid_x",
                "grid_y",
                "level",
                "origin_x",
                "origin_y",
                "patch_size",
                "tissue_fraction",
                "tumor_fraction",
                "label",
            ]
        )
        for r in grid.records:
            w.writerow(
                [
                    r.grid_x,
                    r.grid_y,
                    r.level,
                    r.origin_x,
                    r.origin_y,
                    r.patch_size,
                    repr(r.tissue_fraction),
                    "" if r.tumor_fraction is None else repr(r.tumor_fraction),
                    r.label.value,
                ]
            )


def load_grid(csv_path, json_path) -> PatchGrid:
    with open(json_path) as f:
        head = json.load(f)
    records = []
    with open(csv_path, newline="") as f:
        for row in csv.DictReader(f):
            records.append(
                PatchRecord(
                    grid_x=int(row["grid_x"]),
                    grid_y=int(row["grid_y"]),
                    level=int(row["level"]),
                    origin_x=int(row["origin_x"]),
                    origin_y=int(row["origin_y"]),
                    patch_size=int(row["patch_size"]),
                    tissue_fraction=float(row["tissue_fraction"]),
                    tumor_fraction=float(row["tumor_fraction"]) if row["tumor_fraction"] else None,
                    label=PatchLabel(row["label"]),
                )
            )
    records.sort(key=lambda r: (r.grid_y, r.grid_x))
    return PatchGrid(
        slide_id=head["slide_id"],
        level=head["level"],
        patch_size=head["patch_size"],
        cols=head["cols"],
        rows=head["rows"],
        records=tuple(records),
    )
