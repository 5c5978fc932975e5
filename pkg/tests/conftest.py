import sys
from pathlib import Path

import numpy as np
import pytest

from slideseg.phantom import PhantomSpec, generate_phantom

STUB_DIR = Path(__file__).parent / "stubs"


def stub_cmd(name: str, *args: str) -> tuple[str, ...]:
    return (sys.executable, str(STUB_DIR / name), *args)


@pytest.fixture(scope="session")
def phantom_small(tmp_path_factory):
    """1024x1024 phantom with one tumor blob; shared, read-only."""
    out = tmp_path_factory.mktemp("phantom_small")
    spec = PhantomSpec(
        width=1024,
        height=1024,
        n_tumor_blobs=1,
        blob_radius_range=(160.0, 210.0),
        tissue_coverage=0.6,
        seed=7,
    )
    slide, tissue, tumor = generate_phantom(spec, out, tile_size=128)
    return {"slide": slide, "tissue": tissue, "tumor": tumor, "dir": out, "spec": spec}


@pytest.fixture(scope="session")
def phantom_mid(tmp_path_factory):
    """2048x2048 phantom with one large blob: room for many pure 224 patches."""
    out = tmp_path_factory.mktemp("phantom_mid")
    spec = PhantomSpec(
        width=2048,
        height=2048,
        n_tumor_blobs=1,
        blob_radius_range=(500.0, 560.0),
        tissue_coverage=0.6,
        seed=11,
    )
    slide, tissue, tumor = generate_phantom(spec, out, tile_size=256)
    return {"slide": slide, "tissue": tissue, "tumor": tumor, "dir": out, "spec": spec}


def sample_windows(rng, region_mask, size, count):
    """Top-left corners of count windows lying fully inside region_mask."""
    h, w = region_mask.shape
    out = []
    tries = 0
    while len(out) < count:
        tries += 1
        if tries > count * 2000:
            raise RuntimeError("cannot sample enough windows")
        y = int(rng.integers(0, h - size + 1))
        x = int(rng.integers(0, w - size + 1))
        if region_mask[y : y + size, x : x + size].all():
            out.append((y, x))
    return out


def random_mask(rng, max_side=64, p=None):
    h = int(rng.integers(4, max_side + 1))
    w = int(rng.integers(4, max_side + 1))
    density = float(rng.uniform(0.2, 0.8)) if p is None else p
    return (rng.random((h, w)) < density).astype(np.uint8)
