"""Per-band spectral descriptors: wavelength encodings plus reflectance statistics."""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

PADDING_VALUE = -0.5


class EncodingVariant(enum.Enum):
    FAST_SENSEI = "fast"
    SENSEI_V2 = "v2"


class StatsVariant(enum.Enum):
    FOUR_SUMMARY = "four"
    FIVE_PERCENTILE = "percentile"

    @property
    def width(self) -> int:
        return 4 if self is StatsVariant.FOUR_SUMMARY else 5


PERCENTILES = (1.0, 10.0, 50.0, 90.0, 99.0)


@dataclass(frozen=True)
class BandSpec:
    """Wavelength interval of one band, in nanometres."""

    lambda_min_nm: float
    lambda_max_nm: float

    def __post_init__(self):
        lo, hi = self.lambda_min_nm, self.lambda_max_nm
        if not (300 < lo < 20000 and 300 < hi < 20000):
            raise ValueError(f"wavelengths ({lo}, {hi}) nm outside the (300, 20000) window")
        if lo > hi:
            raise ValueError(f"lambda_min {lo} > lambda_max {hi}")

    @property
    def center_nm(self) -> float:
        return 0.5 * (self.lambda_min_nm + self.lambda_max_nm)


def normalize_wavelength(lambda_nm: float, variant: EncodingVariant = EncodingVariant.FAST_SENSEI) -> float:
    if variant is EncodingVariant.FAST_SENSEI:
        if lambda_nm <= 0:
            raise ValueError("wavelength must be positive")
        return lambda_nm - 400.0
    if lambda_nm <= 300:
        raise ValueError("log normalisation needs wavelength > 300 nm")
    return float(np.log10(lambda_nm - 300.0) - 2.0)


def spectral_encode(lambda_nm, d: int, variant: EncodingVariant = EncodingVariant.FAST_SENSEI) -> np.ndarray:
    """Sinusoidal encoding of a wavelength into ``d`` values (float64).

    Fast layout: ``[sin y0, cos y0, sin y1, cos y1, ...]`` with
    ``y_j = (lambda - 400) / 10000**(2j/d)``, ``j < d/2``.
    V2 layout: ``[sin x0, cos x1, sin x2, cos x3, ...]`` with
    ``x_i = (log10(lambda - 300) - 2) / 10000**(2i/d)``, ``i < d``.
    """
    if d < 2 or d % 2:
        raise ValueError(f"encoding width must be even and >= 2, got {d}")
    norm = normalize_wavelength(float(lambda_nm), variant)
    out = np.empty(d, dtype=np.float64)
    if variant is EncodingVariant.FAST_SENSEI:
        y = norm / 10000.0 ** (2.0 * np.arange(d // 2) / d)
        out[0::2] = np.sin(y)
        out[1::2] = np.cos(y)
    else:
        x = norm / 10000.0 ** (2.0 * np.arange(d) / d)
        out[0::2] = np.sin(x[0::2])
        out[1::2] = np.cos(x[1::2])
    return out


def band_statistics(band, variant: StatsVariant = StatsVariant.FOUR_SUMMARY) -> np.ndarray:
    """(min, max, mean, population std) or the five percentiles of one band."""
    x = np.asarray(band).reshape(1, -1)
    if x.size == 0:
        raise ValueError("empty band")
    return _batch_statistics(x, variant)[0]


def _batch_statistics(bands: np.ndarray, variant: StatsVariant) -> np.ndarray:
    # bands: k x P
    if variant is StatsVariant.FIVE_PERCENTILE:
        return np.percentile(bands.astype(np.float64), PERCENTILES, axis=1, method="linear").T
    mean = bands.mean(axis=1, dtype=np.float64)
    centered = bands - mean[:, None]
    std = np.sqrt(np.einsum("ij,ij->i", centered, centered) / bands.shape[1])
    return np.stack([bands.min(axis=1), bands.max(axis=1), mean, std], axis=1).astype(np.float64)


def descriptor_width(d_enc: int = 32, stats: StatsVariant = StatsVariant.FOUR_SUMMARY) -> int:
    return d_enc + stats.width


def encode_spec(spec: BandSpec, d_enc: int = 32, variant: EncodingVariant = EncodingVariant.FAST_SENSEI) -> np.ndarray:
    half = d_enc // 2
    return np.concatenate([spectral_encode(spec.lambda_min_nm, half, variant),
                           spectral_encode(spec.lambda_max_nm, half, variant)])


def build_descriptor(
    spec: BandSpec,
    band,
    d_enc: int = 32,
    variant: EncodingVariant = EncodingVariant.FAST_SENSEI,
    stats: StatsVariant = StatsVariant.FOUR_SUMMARY,
) -> np.ndarray:
    """``[enc(lambda_min) | enc(lambda_max) | statistics]`` for one band."""
    if d_enc % 4:
        raise ValueError("d_enc must split into two even halves")
    return np.concatenate([encode_spec(spec, d_enc, variant), band_statistics(band, stats)])


def build_descriptor_batch(
    specs: Sequence[Optional[BandSpec]],
    bands,
    n_real: int,
    d_enc: int = 32,
    variant: EncodingVariant = EncodingVariant.FAST_SENSEI,
    stats: StatsVariant = StatsVariant.FOUR_SUMMARY,
) -> tuple[np.ndarray, np.ndarray]:
    """Descriptors for a padded stack of ``Bmax`` bands.

    Rows ``>= n_real`` are padding: their pixels must equal ``PADDING_VALUE`` and
    their descriptor is the zero vector with validity False.
    """
    bands = np.asarray(bands)
    bmax = bands.shape[0]
    if not 1 <= n_real <= bmax:
        raise ValueError(f"n_real must be in [1, {bmax}], got {n_real}")
    if len(specs) < n_real or any(s is None for s in specs[:n_real]):
        raise ValueError("every real band needs a BandSpec")
    if n_real < bmax and not (bands[n_real:] == PADDING_VALUE).all():
        raise ValueError("padding bands must be filled with -0.5")
    width = descriptor_width(d_enc, stats)
    desc = np.zeros((bmax, width), dtype=np.float64)
    for i in range(n_real):
        desc[i, :d_enc] = encode_spec(specs[i], d_enc, variant)
    desc[:n_real, d_enc:] = _batch_statistics(bands[:n_real].reshape(n_real, -1), stats)
    validity = np.zeros(bmax, dtype=bool)
    validity[:n_real] = True
    return desc, validity


def pad_bands(bands, specs: Sequence[BandSpec], bmax: int) -> tuple[np.ndarray, list[Optional[BandSpec]]]:
    """Append padding bands (pixel value -0.5) up to ``bmax``."""
    bands = np.asarray(bands)
    b = bands.shape[0]
    if b > bmax:
        raise ValueError(f"{b} bands exceed Bmax={bmax}")
    if b == bmax:
        return bands, list(specs)
    pad = np.full((bmax - b,) + bands.shape[1:], PADDING_VALUE, dtype=bands.dtype)
    return np.concatenate([bands, pad]), list(specs) + [None] * (bmax - b)
