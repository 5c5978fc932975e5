"""Tiled multi-resolution slide model.

A slide lives on disk as a directory: a JSON manifest plus one RGB PNG per
tile, named ``L{level}_x{tx}_y{ty}.png``. Level 0 is the full-resolution
raster; each next level halves both dimensions (rounding up) via 2x2 box
averaging with round-half-up, until the largest dimension fits in one tile.
Edge tiles are stored at their true partial size.

Slides are immutable once written; concurrent region reads are safe.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import BoundsError, InputError, UnsupportedFormatError
from .interp import bilinear_resize_u8
from .pngio import load_rgb_png, save_rgb_png

MANIFEST_NAME = "manifest.json"


@dataclass(frozen=True)
class LevelDesc:
    level: int
    width: int
    height: int
    downsample_factor: int


@dataclass(frozen=True)
class Region:
    level: int
    x: int
    y: int
    width: int
    height: int


@dataclass(frozen=True)
class TiledSlide:
    slide_id: str
    levels: tuple[LevelDesc, ...]
    tile_size: int
    channels: int
    source_path: Path

    def level_desc(self, level: int) -> LevelDesc:
        if not 0 <= level < len(self.levels):
            raise BoundsError(f"level {level} out of range (slide has {len(self.levels)})")
        return self.levels[level]

    @property
    def num_levels(self) -> int:
        return len(self.levels)


def _box_halve(arr: np.ndarray) -> np.ndarray:
    """2x2 box average with round-half-up; odd edges clamp-replicate."""
    h, w = arr.shape[:2]
    if h % 2:
        arr = np.concatenate([arr, arr[-1:]], axis=0)
    if w % 2:
        arr = np.concatenate([arr, arr[:, -1:]], axis=1)
    a = arr.astype(np.uint32)
    s = a[0::2, 0::2] + a[1::2, 0::2] + a[0::2, 1::2] + a[1::2, 1::2]
    return ((s + 2) // 4).astype(np.uint8)


def build_pyramid(level0: np.ndarray, tile_size: int) -> list[np.ndarray]:
    """All pyramid levels, finest first, until max(w, h) <= tile_size."""
    levels = [level0]
    while max(levels[-1].shape[0], levels[-1].shape[1]) > tile_size:
        levels.append(_box_halve(levels[-1]))
    return levels


def _tile_name(level: int, tx: int, ty: int) -> str:
    return f"L{level}_x{tx}_y{ty}.png"


def import_from_array(
    arr: np.ndarray, tile_size: int, slide_id: str, out_dir
) -> TiledSlide:
    """Tile an in-memory HxWx3 uint8 raster into a slide directory."""
    arr = np.asarray(arr)
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.dtype != np.uint8:
        raise UnsupportedFormatError(
            f"expected HxWx3 uint8 raster, got shape {arr.shape} dtype {arr.dtype}"
        )
    if tile_size < 1 or tile_size & (tile_size - 1):
        raise InputError(f"tile_size must be a positive power of two, got {tile_size}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    descs = []
    for lv, data in enumerate(build_pyramid(arr, tile_size)):
        h, w = data.shape[:2]
        descs.append(LevelDesc(level=lv, width=w, height=h, downsample_factor=2**lv))
        for ty in range(0, h, tile_size):
            for tx in range(0, w, tile_size):
                tile = data[ty : ty + tile_size, tx : tx + tile_size]
                save_rgb_png(
                    out_dir / _tile_name(lv, tx // tile_size, ty // tile_size), tile
                )

    manifest = {
        "slide_id": slide_id,
        "tile_size": tile_size,
        "channels": 3,
        "levels": [
            {
                "level": d.level,
                "width": d.width,
                "height": d.height,
                "downsample_factor": d.downsample_factor,
            }
            for d in descs
        ],
    }
    with open(out_dir / MANIFEST_NAME, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return TiledSlide(
        slide_id=slide_id,
        levels=tuple(descs),
        tile_size=tile_size,
        channels=3,
        source_path=out_dir,
    )


def import_raster(path, tile_size: int, out_dir, slide_id: str | None = None) -> TiledSlide:
    """Import an 8-bit RGB PNG/TIFF into the tiled slide format."""
    path = Path(path)
    if not path.is_file():
        raise InputError(f"no such file: {path}")
    try:
        with Image.open(path) as im:
            mode = im.mode
            if mode not in ("RGB",):
                raise UnsupportedFormatError(f"expected 8-bit RGB raster, got mode {mode}")
            arr = np.asarray(im, dtype=np.uint8)
    except UnsupportedFormatError:
        raise
    except Exception as exc:
        raise InputError(f"cannot read raster {path}: {exc}") from exc
    return import_from_array(arr, tile_size, slide_id or path.stem, out_dir)


def open_slide(slide_dir) -> TiledSlide:
    """Load a slide directory written by import_raster/import_from_array."""
    slide_dir = Path(slide_dir)
    manifest_path = slide_dir / MANIFEST_NAME
    if not manifest_path.is_file():
        raise InputError(f"not a slide directory (missing {MANIFEST_NAME}): {slide_dir}")
    with open(manifest_path) as f:
        m = json.load(f)
    descs = tuple(
        LevelDesc(
            level=e["level"],
            width=e["width"],
            height=e["height"],
            downsample_factor=e["downsample_factor"],
        )
        for e in sorted(m["levels"], key=lambda e: e["level"])
    )
    return TiledSlide(
        slide_id=m["slide_id"],
        levels=descs,
        tile_size=m["tile_size"],
        channels=m.get("channels", 3),
        source_path=slide_dir,
    )


@lru_cache(maxsize=128)
def _tile_cached(path_str: str) -> np.ndarray:
    return load_rgb_png(path_str)


def clear_tile_cache() -> None:
    _tile_cached.cache_clear()


def read_region(slide: TiledSlide, region: Region) -> np.ndarray:
    """Exact pixel block for a region; raises BoundsError instead of clamping."""
    desc = slide.level_desc(region.level)
    if region.width <= 0 or region.height <= 0:
        raise BoundsError(f"region dims must be positive, got {region.width}x{region.height}")
    if (
        region.x < 0
        or region.y < 0
        or region.x + region.width > desc.width
        or region.y + region.height > desc.height
    ):
        raise BoundsError(
            f"region {region} exceeds level {desc.level} bounds {desc.width}x{desc.height}"
        )
    ts = slide.tile_size
    out = np.empty((region.height, region.width, 3), dtype=np.uint8)
    ty0, ty1 = region.y // ts, (region.y + region.height - 1) // ts
    tx0, tx1 = region.x // ts, (region.x + region.width - 1) // ts
    for ty in range(ty0, ty1 + 1):
        for tx in range(tx0, tx1 + 1):
            tile = _tile_cached(str(slide.source_path / _tile_name(region.level, tx, ty)))
            # Intersection of the region with this tile, in level coordinates.
            x_lo = max(region.x, tx * ts)
            x_hi = min(region.x + region.width, tx * ts + tile.shape[1])
            y_lo = max(region.y, ty * ts)
            y_hi = min(region.y + region.height, ty * ts + tile.shape[0])
            out[y_lo - region.y : y_hi - region.y, x_lo - region.x : x_hi - region.x] = tile[
                y_lo - ty * ts : y_hi - ty * ts, x_lo - tx * ts : x_hi - tx * ts
            ]
    return out


def read_level(slide: TiledSlide, level: int) -> np.ndarray:
    """Whole pyramid level as one array."""
    desc = slide.level_desc(level)
    return read_region(slide, Region(level, 0, 0, desc.width, desc.height))


def downsample_to(slide: TiledSlide, target_w: int, target_h: int) -> np.ndarray:
    """Fixed-size thumbnail: smallest level covering the target, then bilinear.

    Aspect ratio is not preserved; the output is exactly
    ``target_h x target_w x 3``.
    """
    if target_w < 1 or target_h < 1:
        raise InputError(f"target dims must be >= 1, got {target_w}x{target_h}")
    pick = slide.levels[0]
    for desc in slide.levels:
        if desc.width >= target_w and desc.height >= target_h:
            pick = desc
    data = read_level(slide, pick.level)
    if (pick.width, pick.height) == (target_w, target_h):
        return data
    return bilinear_resize_u8(data, target_h, target_w)
