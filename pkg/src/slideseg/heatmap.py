"""Heatmap stitching, resizing, and fusion into the refinement input.

Patch probabilities land on the grid lattice (excluded and unclassified
cells carry 0), the lattice raster is resized bilinearly (align-corners, see
interp.py), and the result is stacked behind the normalized down-sampled RGB
as channel 3 of a 4-channel float tensor.

On disk: heatmaps are 16-bit grayscale PNG (value = round(p * 65535)) with a
JSON sidecar; refinement inputs are raw little-endian float32 planar
(channel, row, col) files with a JSON header.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConsistencyError, InputError
from .interp import bilinear_resize
from .pngio import load_heatmap_png16, save_heatmap_png16
from .tissue import PatchGrid

DEFAULT_REFINEMENT_SIZE = 1120


@dataclass(frozen=True)
class Heatmap:
    slide_id: str
    cols: int
    rows: int
    values: np.ndarray  # float64 (rows, cols) in [0, 1]


@dataclass(frozen=True)
class RefinementInput:
    width: int
    height: int
    channels: int
    data: np.ndarray  # float32 (height, width, channels) in [0, 1]


def stitch_heatmap(grid: PatchGrid, probs) -> Heatmap:
    """Place each p_tumor at its lattice cell; everything else stays 0."""
    values = np.zeros((grid.rows, grid.cols), dtype=np.float64)
    seen = set()
    for p in probs:
        if not (0 <= p.grid_x < grid.cols and 0 <= p.grid_y < grid.rows):
            raise ConsistencyError(
                f"probability index ({p.grid_x},{p.grid_y}) outside grid "
                f"{grid.cols}x{grid.rows}"
            )
        key = (p.grid_x, p.grid_y)
        if key in seen:
            raise ConsistencyError(f"duplicate probability for cell {key}")
        seen.add(key)
        if not np.isfinite(p.p_tumor) or not 0.0 <= p.p_tumor <= 1.0:
            raise ConsistencyError(f"probability out of range at {key}: {p.p_tumor}")
        values[p.grid_y, p.grid_x] = p.p_tumor
    return Heatmap(slide_id=grid.slide_id, cols=grid.cols, rows=grid.rows, values=values)


def resize_heatmap(hm: Heatmap, target: int) -> np.ndarray:
    """Bilinear align-corners resize to target x target; values stay in [0,1]."""
    if target < 1:
        raise InputError(f"target must be >= 1, got {target}")
    out = bilinear_resize(hm.values, target, target)
    return np.clip(out, 0.0, 1.0)


def fuse_inputs(rgb: np.ndarray, hm: np.ndarray) -> RefinementInput:
    """Stack [R/255, G/255, B/255, heatmap] into one 4-channel tensor."""
    rgb = np.asarray(rgb)
    hm = np.asarray(hm, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ConsistencyError(f"expected HxWx3 RGB block, got {rgb.shape}")
    if hm.shape != rgb.shape[:2]:
        raise ConsistencyError(f"heatmap {hm.shape} does not match RGB {rgb.shape[:2]}")
    data = np.empty((rgb.shape[0], rgb.shape[1], 4), dtype=np.float32)
    data[:, :, :3] = rgb.astype(np.float32) / 255.0
    data[:, :, 3] = hm.astype(np.float32)
    return RefinementInput(
        width=rgb.shape[1], height=rgb.shape[0], channels=4, data=data
    )


def save_heatmap(hm: Heatmap, png_path, json_path) -> None:
    save_heatmap_png16(png_path, hm.values)
    with open(json_path, "w") as f:
        json.dump(
            {"slide_id": hm.slide_id, "cols": hm.cols, "rows": hm.rows},
            f,
            indent=2,
            sort_keys=True,
        )
        f.write("\n")


def load_heatmap(png_path, json_path) -> Heatmap:
    with open(json_path) as f:
        head = json.load(f)
    values = load_heatmap_png16(png_path)
    if values.shape != (head["rows"], head["cols"]):
        raise ConsistencyError(
            f"heatmap raster {values.shape} does not match sidecar "
            f"({head['rows']}, {head['cols']})"
        )
    return Heatmap(
        slide_id=head["slide_id"], cols=head["cols"], rows=head["rows"], values=values
    )


def save_refinement_input(ri: RefinementInput, bin_path, json_path) -> None:
    planar = np.ascontiguousarray(np.moveaxis(ri.data, 2, 0), dtype="<f4")
    with open(bin_path, "wb") as f:
        f.write(planar.tobytes())
    with open(json_path, "w") as f:
        json.dump(
            {
                "width": ri.width,
                "height": ri.height,
                "channels": ri.channels,
                "dtype": "<f4",
                "layout": "planar",
            },
            f,
            indent=2,
            sort_keys=True,
        )
        f.write("\n")


def load_refinement_input(bin_path, json_path) -> RefinementInput:
    with open(json_path) as f:
        head = json.load(f)
    c, h, w = head["channels"], head["height"], head["width"]
    raw = np.fromfile(Path(bin_path), dtype="<f4")
    if raw.size != c * h * w:
        raise ConsistencyError(
            f"refinement input has {raw.size} floats, header says {c * h * w}"
        )
    data = np.moveaxis(raw.reshape((c, h, w)), 0, 2)
    return RefinementInput(width=w, height=h, channels=c, data=np.ascontiguousarray(data))
