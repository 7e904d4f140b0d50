"""Bundled test imagery: 20 natural photographs plus procedural scenes.

The photographs are 8-bit crops stored in ``condnoise/data`` (see
``ATTRIBUTION.txt`` there). Procedural scenes are regenerated on demand.
"""
from __future__ import annotations

from functools import lru_cache
from importlib import resources

import numpy as np

from .image_io import ColorImage, ImagePlane, load_color, load_image

NATURAL_NAMES = (
    "astronaut", "camera", "coffee", "chelsea", "rocket_a", "rocket_b", "coins",
    "moon", "clock", "immunohistochemistry", "cell", "grass", "gravel", "brick",
    "retina", "hubble", "china_a", "china_b", "flower_a", "flower_b",
)

PROCEDURAL_NAMES = (
    "ramp", "blobs", "steps", "sine", "checker", "radial", "stripes", "mosaic",
)


def _data_path(name):
    root = resources.files("condnoise") / "data"
    for ext in (".ppm", ".pgm"):
        p = root / f"{name}{ext}"
        if p.is_file():
            return p
    raise FileNotFoundError(f"no bundled image named {name!r}")


@lru_cache(maxsize=None)
def _natural(name):
    with resources.as_file(_data_path(name)) as p:
        return load_image(p)


def natural_plane(name: str) -> ImagePlane:
    """Grayscale version (luma for color sources)."""
    img = _natural(name)
    plane = img.luma() if isinstance(img, ColorImage) else img
    return ImagePlane(plane.data.copy(), plane.bit_depth)


def natural_color(name: str) -> ColorImage:
    with resources.as_file(_data_path(name)) as p:
        return load_color(p)


def natural_suite() -> list[ImagePlane]:
    return [natural_plane(n) for n in NATURAL_NAMES]


def _grid(size):
    y, x = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    return y, x


def procedural_plane(name: str, size: int = 256, seed: int = 0) -> ImagePlane:
    """Deterministic synthetic scene with values in [0.05, 0.95]."""
    rng = np.random.default_rng(seed)
    y, x = _grid(size)
    if name == "ramp":
        img = 0.6 * x + 0.3 * y
    elif name == "blobs":
        img = np.zeros_like(x)
        for _ in range(8):
            cy, cx = rng.uniform(0, 1, 2)
            r = rng.uniform(0.08, 0.3)
            img += rng.uniform(-0.5, 1.0) * np.exp(-((y - cy) ** 2 + (x - cx) ** 2) / (2 * r * r))
    elif name == "steps":
        img = np.floor(x * 6) / 6 * 0.7 + 0.15 * (y > 0.5)
    elif name == "sine":
        f1, f2 = rng.uniform(2, 6, 2)
        img = 0.5 + 0.25 * np.sin(2 * np.pi * f1 * x) * np.cos(2 * np.pi * f2 * y)
    elif name == "checker":
        n = 8
        img = ((np.floor(x * n) + np.floor(y * n)) % 2) * 0.6 + 0.2
    elif name == "radial":
        img = np.hypot(x - 0.5, y - 0.5)
    elif name == "stripes":
        img = 0.3 + 0.4 * (np.sin(2 * np.pi * 12 * (x + 0.3 * y)) > 0)
    elif name == "mosaic":
        n = 6
        tiles = rng.uniform(0.1, 0.9, (n, n))
        iy = np.minimum((y * n).astype(int), n - 1)
        ix = np.minimum((x * n).astype(int), n - 1)
        img = tiles[iy, ix] + 0.1 * x
    else:
        raise KeyError(f"unknown procedural scene {name!r}")
    lo, hi = img.min(), img.max()
    img = (img - lo) / (hi - lo) if hi > lo else np.full_like(img, 0.5)
    return ImagePlane(0.05 + 0.9 * img, 32)


def procedural_color(name: str, size: int = 256, seed: int = 0) -> ColorImage:
    """Color scene: the gray scene tinted by a smooth random per-channel gain."""
    base = procedural_plane(name, size, seed).data
    rng = np.random.default_rng(seed + 1)
    y, x = _grid(size)
    chans = []
    for _ in range(3):
        g = rng.uniform(0.6, 1.0) + rng.uniform(-0.2, 0.2) * x + rng.uniform(-0.2, 0.2) * y
        chans.append(np.clip(base * g, 0.0, 1.0))
    return ColorImage(np.stack(chans), 32)


def procedural_suite(size: int = 256, seed: int = 0) -> list[ImagePlane]:
    return [procedural_plane(n, size, seed + i) for i, n in enumerate(PROCEDURAL_NAMES)]


def color_pool(include_procedural: bool = True, size: int = 256) -> list[ColorImage]:
    """All bundled images in color (gray sources replicated to RGB)."""
    pool = [natural_color(n) for n in NATURAL_NAMES]
    if include_procedural:
        pool += [procedural_color(n, size, i) for i, n in enumerate(PROCEDURAL_NAMES)]
    return pool
