"""Tile samples, label merging, band-subset sampling and dihedral augmentation."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .descriptor import BandSpec

CLEAR, THICK, THIN = 0, 1, 2
IGNORE = 255
CLASS_NAMES = ("Clear", "Thick cloud", "Thin cloud")

# Raw annotation codes accepted by merge_shadow_to_clear.
RAW_UNDEFINED, RAW_CLEAR, RAW_SHADOW, RAW_THIN, RAW_THICK = 0, 1, 2, 3, 4
RAW_TO_TRAIN = {
    RAW_UNDEFINED: IGNORE,
    RAW_CLEAR: CLEAR,
    RAW_SHADOW: CLEAR,
    RAW_THIN: THIN,
    RAW_THICK: THICK,
}


@dataclass
class TileSample:
    """``B x H x W`` reflectance with one BandSpec per band and an optional label mask."""

    bands: np.ndarray
    specs: list[BandSpec]
    mask: Optional[np.ndarray] = None
    name: str = field(default="", compare=False)

    def __post_init__(self):
        self.bands = np.asarray(self.bands)
        if self.bands.ndim != 3:
            raise ValueError(f"bands must be B x H x W, got {self.bands.shape}")
        if len(self.specs) != self.bands.shape[0]:
            raise ValueError(f"{len(self.specs)} specs for {self.bands.shape[0]} bands")
        if self.mask is not None:
            self.mask = np.asarray(self.mask)
            if self.mask.shape != self.bands.shape[1:]:
                raise ValueError(f"mask {self.mask.shape} does not match bands {self.bands.shape[1:]}")

    @property
    def n_bands(self) -> int:
        return self.bands.shape[0]

    def subset(self, indices: Sequence[int]) -> "TileSample":
        idx = list(indices)
        return TileSample(self.bands[idx], [self.specs[i] for i in idx], self.mask, self.name)


def merge_shadow_to_clear(raw_mask, mapping: Optional[dict] = None) -> np.ndarray:
    """Map raw annotation codes to training labels (shadow becomes clear, undefined is ignored)."""
    mapping = RAW_TO_TRAIN if mapping is None else mapping
    raw = np.asarray(raw_mask)
    unknown = np.setdiff1d(np.unique(raw), list(mapping))
    if unknown.size:
        raise ValueError(f"unknown raw label values {unknown.tolist()}")
    lut = np.full(max(mapping) + 1, IGNORE, dtype=np.uint8)
    for k, v in mapping.items():
        lut[k] = v
    return lut[raw]


def sample_band_subset(specs: Union[Sequence, int], rng: np.random.Generator) -> tuple[np.ndarray, int]:
    """Draw k uniformly from 1..B, then a uniform k-subset (sorted ascending)."""
    b = specs if isinstance(specs, (int, np.integer)) else len(specs)
    if b < 1:
        raise ValueError("need at least one band")
    k = int(rng.integers(1, b + 1))
    idx = np.sort(rng.choice(b, size=k, replace=False))
    return idx, k


def dihedral(arr: np.ndarray, element: int) -> np.ndarray:
    """Apply dihedral element 0..7 to the last two axes: ``rot90^(e%4)`` then a horizontal flip if ``e>=4``."""
    if not 0 <= element < 8:
        raise ValueError("dihedral element must be in 0..7")
    out = np.rot90(arr, element % 4, axes=(-2, -1))
    if element >= 4:
        out = out[..., ::-1]
    return np.ascontiguousarray(out)


def augment(tile: TileSample, rng: np.random.Generator, element: Optional[int] = None) -> TileSample:
    """Same random flip/rot90 on all bands and the mask (uniform over the 8 elements)."""
    e = int(rng.integers(0, 8)) if element is None else element
    h, w = tile.bands.shape[1:]
    if e % 4 in (1, 3) and h != w:
        raise ValueError("rotation needs a square tile")
    mask = None if tile.mask is None else dihedral(tile.mask, e)
    return TileSample(dihedral(tile.bands, e), list(tile.specs), mask, tile.name)
