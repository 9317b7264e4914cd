"""Seeded synthetic cloud tiles for desk-scale training.

Labels come from two thresholded, Gaussian-smoothed noise fields (one for
thick cloud, one for thin cloud).  Reflectance per band mixes a surface
spectrum with a bright, flat cloud spectrum according to the class, plus
smooth texture and pixel noise.
"""
from __future__ import annotations

from typing import Optional

import numpy as np
from scipy.ndimage import gaussian_filter

from .data import CLEAR, THICK, THIN, TileSample
from .descriptor import BandSpec

# Landsat 8 OLI VNIR bands (coastal, blue, green, red, NIR), nm.
LANDSAT8_VNIR = [
    BandSpec(433.0, 453.0),
    BandSpec(450.0, 515.0),
    BandSpec(525.0, 600.0),
    BandSpec(630.0, 680.0),
    BandSpec(845.0, 885.0),
]

# Sentinel-2 MSI VNIR bands B1..B9 without SWIR, nm.
SENTINEL2_VNIR = [
    BandSpec(433.0, 453.0),
    BandSpec(458.0, 523.0),
    BandSpec(543.0, 578.0),
    BandSpec(650.0, 680.0),
    BandSpec(698.0, 713.0),
    BandSpec(733.0, 748.0),
    BandSpec(773.0, 793.0),
    BandSpec(785.0, 900.0),
    BandSpec(855.0, 875.0),
    BandSpec(935.0, 955.0),
]


def _surface(lam: np.ndarray) -> np.ndarray:
    # vegetation-like: dark visible, red-edge step to a bright NIR plateau
    return 0.06 + 0.02 * (lam < 480) + 0.22 / (1.0 + np.exp(-(lam - 715.0) / 15.0))


def _cloud(lam: np.ndarray, thickness: float) -> np.ndarray:
    return thickness * (0.85 - 0.05 * (lam - 400.0) / 600.0)


def _field(rng: np.random.Generator, size: int, sigma: float) -> np.ndarray:
    f = gaussian_filter(rng.standard_normal((size, size)), sigma, mode="wrap")
    return (f - f.mean()) / (f.std() + 1e-12)


def make_tile(rng: np.random.Generator, size: int = 64, specs=LANDSAT8_VNIR, sigma: float = 20.0,
              threshold: float = 0.5, thin_threshold: Optional[float] = 0.2, noise: float = 0.02) -> TileSample:
    thin_threshold = threshold if thin_threshold is None else thin_threshold
    thick = _field(rng, size, sigma) > threshold
    thin = (_field(rng, size, sigma) > thin_threshold) & ~thick
    mask = np.full((size, size), CLEAR, dtype=np.uint8)
    mask[thin] = THIN
    mask[thick] = THICK

    lam = np.array([s.center_nm for s in specs])[:, None, None]
    texture = 0.03 * _field(rng, size, 2.0)[None]
    brightness = 1.0 + 0.1 * rng.uniform(-1, 1)
    surface = _surface(lam) * brightness + texture
    thin_cloud = 0.5 * surface + _cloud(lam, 0.5)
    thick_cloud = _cloud(lam, 1.0) + 0.5 * texture
    bands = np.where(thick[None], thick_cloud, np.where(thin[None], thin_cloud, surface))
    bands = bands + noise * rng.standard_normal(bands.shape)
    return TileSample(bands.astype(np.float32), list(specs), mask)


def make_dataset(n: int, seed: int = 0, size: int = 64, specs=LANDSAT8_VNIR, **kwargs) -> list[TileSample]:
    rng = np.random.default_rng(seed)
    tiles = [make_tile(rng, size, specs, **kwargs) for _ in range(n)]
    for i, t in enumerate(tiles):
        t.name = f"syn{seed}_{i:04d}"
    return tiles
