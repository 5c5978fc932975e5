"""Synthetic slides with exactly known tissue and tumor masks.

The phantom is built from three seeded textures layered by exact geometry:
near-white low-noise glass, a pink stroma texture inside one smoothly
deformed disc (the tissue region), and purple, higher-variance tumor
textures inside deformed discs placed fully within the tissue. The drawn
geometry doubles as the ground truth, so downstream stages can be scored
against masks that are correct by construction.

Texture parameters are fixed constants: the heuristic backend's frozen
feature weights were fitted against them, and goldens in the test suite
depend on them staying put.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InputError, PlacementError
from .pngio import save_mask_png
from .rng import derive_rng
from .slide import TiledSlide, import_from_array

# (base RGB, per-channel noise amplitude, base cell size, octaves)
GLASS_TEXTURE = ((252.0, 252.0, 252.0), (1.6, 1.6, 1.6), 8, 1)
STROMA_TEXTURE = ((225.0, 152.0, 182.0), (20.0, 18.0, 14.0), 48, 4)
TUMOR_TEXTURE = ((168.0, 112.0, 178.0), (46.0, 40.0, 38.0), 16, 4)

_TISSUE_DEFORM = 0.05
_TUMOR_DEFORM = 0.08
_PLACEMENT_RETRIES = 200
_PLACEMENT_RESTARTS = 8


@dataclass(frozen=True)
class PhantomSpec:
    width: int = 4096
    height: int = 4096
    n_tumor_blobs: int = 2
    blob_radius_range: tuple[float, float] = (500.0, 750.0)
    tissue_coverage: float = 0.68
    seed: int = 0
    texture_seed: int | None = None  # defaults to seed

    def validate(self) -> None:
        if self.width < 64 or self.height < 64:
            raise InputError(f"phantom dims must be >= 64, got {self.width}x{self.height}")
        if not 0.0 < self.tissue_coverage <= 1.0:
            raise InputError(f"tissue_coverage must be in (0,1], got {self.tissue_coverage}")
        lo, hi = self.blob_radius_range
        if not 0 < lo <= hi:
            raise InputError(f"blob_radius_range must be positive and ordered, got {(lo, hi)}")
        if self.n_tumor_blobs < 0:
            raise InputError(f"n_tumor_blobs must be >= 0, got {self.n_tumor_blobs}")


def _value_noise(h: int, w: int, cell: int, rng: np.random.Generator) -> np.ndarray:
    """Smoothstep-interpolated lattice noise in [-1, 1].

    Interpolation is separable: blend along x at lattice-row resolution,
    then along y at full resolution.
    """
    gh, gw = h // cell + 2, w // cell + 2
    grid = rng.uniform(-1.0, 1.0, size=(gh, gw)).astype(np.float32)
    ys = np.arange(h, dtype=np.float32) / cell
    xs = np.arange(w, dtype=np.float32) / cell
    y0 = ys.astype(np.int64)
    x0 = xs.astype(np.int64)
    wy = ys - y0
    wx = xs - x0
    wy = (wy * wy * (3 - 2 * wy))[:, None]
    wx = (wx * wx * (3 - 2 * wx))[None, :]
    rows = grid[:, x0 + 1]
    rows -= grid[:, x0]
    rows *= wx
    rows += grid[:, x0]  # (gh, w) lerp along x
    out = rows[y0 + 1]
    out -= rows[y0]
    out *= wy
    out += rows[y0]
    return out


def _fractal_noise(
    h: int, w: int, base_cell: int, octaves: int, rng: np.random.Generator
) -> np.ndarray:
    total = np.zeros((h, w), dtype=np.float32)
    amp, norm = 1.0, 0.0
    for o in range(octaves):
        cell = max(2, base_cell >> o)
        vn = _value_noise(h, w, cell, rng)
        vn *= amp
        total += vn
        norm += amp
        amp *= 0.55
    total /= norm
    return total


def _texture_field(h: int, w: int, params, rng: np.random.Generator) -> np.ndarray:
    """Normalized noise field for one texture (channels scale it later)."""
    _, _, cell, octaves = params
    return _fractal_noise(h, w, cell, octaves, rng)


_PROFILE_TABLE_N = 8192


def _deform_profile(rng: np.random.Generator, harmonics=(2, 3, 4, 5)):
    """Smooth 2-pi-periodic radial modulation with |s| <= 1.

    Evaluated through a dense lookup table with linear interpolation; the
    table is fine enough (8192 angles) that boundary jitter stays far below
    one pixel at phantom scale.
    """
    coeffs = rng.uniform(0.4, 1.0, size=len(harmonics))
    coeffs /= coeffs.sum()
    phases = rng.uniform(0.0, 2 * np.pi, size=len(harmonics))
    angles = np.linspace(-np.pi, np.pi, _PROFILE_TABLE_N + 1)
    table = np.zeros_like(angles)
    for hh, c, ph in zip(harmonics, coeffs, phases):
        table += c * np.sin(hh * angles + ph)

    def profile(theta: np.ndarray) -> np.ndarray:
        return np.interp(theta, angles, table)

    return profile


def _rasterize_blob(
    h: int, w: int, cx: float, cy: float, r0: float, deform: float, profile
) -> np.ndarray:
    """Exact bitmap of one deformed disc: dist <= r0 * (1 + deform*s(theta))."""
    rmax = r0 * (1 + deform)
    y0, y1 = max(0, int(cy - rmax) - 1), min(h, int(cy + rmax) + 2)
    x0, x1 = max(0, int(cx - rmax) - 1), min(w, int(cx + rmax) + 2)
    yy, xx = np.mgrid[y0:y1, x0:x1]
    dx = xx - cx
    dy = yy - cy
    dist = np.hypot(dx, dy)
    theta = np.arctan2(dy, dx)
    inside = dist <= r0 * (1.0 + deform * profile(theta))
    bits = np.zeros((h, w), dtype=np.uint8)
    bits[y0:y1, x0:x1] = inside
    return bits


def phantom_arrays(spec: PhantomSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(rgb, tissue_truth, tumor_truth) as arrays; deterministic given seed."""
    spec.validate()
    h, w = spec.height, spec.width
    tex_seed = spec.seed if spec.texture_seed is None else spec.texture_seed

    # Geometry: one deformed tissue disc centered on the slide.
    geom = derive_rng(spec.seed, "phantom", "geometry")
    r_tissue = float(np.sqrt(spec.tissue_coverage * w * h / np.pi))
    if r_tissue * (1 + _TISSUE_DEFORM) > min(w, h) / 2.0 - 8:
        raise InputError(
            f"tissue_coverage {spec.tissue_coverage} does not fit in {w}x{h}"
        )
    cx, cy = w / 2.0, h / 2.0
    tissue = _rasterize_blob(h, w, cx, cy, r_tissue, _TISSUE_DEFORM, _deform_profile(geom))

    # Tumor blobs: non-overlapping deformed discs fully inside the tissue.
    # Rejection sampling can paint itself into a corner (first blob central),
    # so a failed configuration restarts from scratch a bounded number of times.
    r_inner = r_tissue * (1 - _TISSUE_DEFORM)
    placed: list[tuple[float, float, float]] = []
    for restart in range(_PLACEMENT_RESTARTS):
        placed = []
        ok = True
        for _ in range(spec.n_tumor_blobs):
            for _ in range(_PLACEMENT_RETRIES):
                r = float(geom.uniform(*spec.blob_radius_range))
                r_eff = r * (1 + _TUMOR_DEFORM)
                max_off = r_inner - r_eff - 16
                if max_off <= 0:
                    continue
                ang = float(geom.uniform(0, 2 * np.pi))
                off = float(np.sqrt(geom.uniform(0, 1)) * max_off)
                bx, by = cx + off * np.cos(ang), cy + off * np.sin(ang)
                if all(
                    np.hypot(bx - px, by - py) > r_eff + pr * (1 + _TUMOR_DEFORM) + 8
                    for px, py, pr in placed
                ):
                    placed.append((bx, by, r))
                    break
            else:
                ok = False
                break
        if ok:
            break
    else:
        raise PlacementError(
            f"could not place {spec.n_tumor_blobs} tumor blobs after "
            f"{_PLACEMENT_RESTARTS} restarts of {_PLACEMENT_RETRIES} attempts"
        )
    tumor = np.zeros((h, w), dtype=np.uint8)
    for bx, by, r in placed:
        tumor |= _rasterize_blob(h, w, bx, by, r, _TUMOR_DEFORM, _deform_profile(geom))
    tumor &= tissue  # exact containment by construction; enforce bitwise anyway

    # Noise fields are independent seeded streams, so they can be produced
    # concurrently without affecting determinism.
    jobs = {
        "glass": (GLASS_TEXTURE, derive_rng(tex_seed, "phantom", "glass")),
        "stroma": (STROMA_TEXTURE, derive_rng(tex_seed, "phantom", "stroma")),
        "tumor": (TUMOR_TEXTURE, derive_rng(tex_seed, "phantom", "tumor")),
    }
    with ThreadPoolExecutor(max_workers=3) as pool:
        futures = {
            name: pool.submit(_texture_field, h, w, params, rng)
            for name, (params, rng) in jobs.items()
        }
        fields = {name: fut.result() for name, fut in futures.items()}

    t_mask = tissue.astype(bool)
    u_mask = tumor.astype(bool)
    s_mask = t_mask & ~u_mask
    rgb = np.empty((h, w, 3), dtype=np.uint8)
    for ch in range(3):
        plane = GLASS_TEXTURE[1][ch] * fields["glass"]
        plane += GLASS_TEXTURE[0][ch]
        for name, mask, params in (
            ("stroma", s_mask, STROMA_TEXTURE),
            ("tumor", u_mask, TUMOR_TEXTURE),
        ):
            plane[mask] = params[1][ch] * fields[name][mask] + params[0][ch]
        plane += 0.5
        np.floor(plane, out=plane)
        np.clip(plane, 0, 255, out=plane)
        rgb[:, :, ch] = plane.astype(np.uint8)
    return rgb, tissue, tumor


def generate_phantom(
    spec: PhantomSpec, out_dir, slide_id: str | None = None, tile_size: int = 512
) -> tuple[TiledSlide, np.ndarray, np.ndarray]:
    """Write a phantom slide directory plus tissue_truth.png / tumor_truth.png."""
    rgb, tissue, tumor = phantom_arrays(spec)
    out_dir = Path(out_dir)
    slide_id = slide_id or f"phantom_{spec.seed}"
    slide = import_from_array(rgb, tile_size, slide_id, out_dir)
    save_mask_png(out_dir / "tissue_truth.png", tissue)
    save_mask_png(out_dir / "tumor_truth.png", tumor)
    return slide, tissue, tumor
