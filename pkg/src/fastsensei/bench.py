"""Encoder latency benchmark (median of N timed runs after warmup)."""
from __future__ import annotations

import contextlib
import json
import time
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from .data import TileSample
from .descriptor import EncodingVariant, StatsVariant
from .encoder import BAND_EMBEDDING, ORIGINAL_SIZE, EncoderConfig, encoder_forward, init_encoder
from .synthetic import SENTINEL2_VNIR

try:
    import resource
except ImportError:  # pragma: no cover - non-POSIX
    resource = None

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover
    threadpool_limits = None

_DEFAULT = EncoderConfig()

VARIANTS: dict[str, EncoderConfig] = {
    "fast-sensei": _DEFAULT,
    "band-embedding": _DEFAULT.with_(output_block=BAND_EMBEDDING),
    "output-32": _DEFAULT.with_(c_out=32),
    "orig-size": ORIGINAL_SIZE,
    "orig-encoding": _DEFAULT.with_(encoding=EncodingVariant.SENSEI_V2),
    "percentile-stats": _DEFAULT.with_(stats=StatsVariant.FIVE_PERCENTILE),
    # all single changes together; timed with the four summary statistics
    "sensei-v2": ORIGINAL_SIZE.with_(output_block=BAND_EMBEDDING, c_out=32, encoding=EncodingVariant.SENSEI_V2),
}


@dataclass
class BenchReport:
    variant: str
    bands: int
    height: int
    width: int
    iterations: int
    warmup: int
    median_ms: float
    min_ms: float
    max_ms: float
    fps: float
    peak_rss_mb: Optional[float]

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    def line(self) -> str:
        mem = "n/a" if self.peak_rss_mb is None else f"{self.peak_rss_mb:.1f} MB"
        return (f"{self.variant:<16} bands={self.bands:<2} {self.height}x{self.width} "
                f"median={self.median_ms:8.2f} ms  [{self.min_ms:.2f}, {self.max_ms:.2f}]  "
                f"fps={self.fps:7.2f}  peak_rss={mem}")


def _peak_rss_mb() -> Optional[float]:
    if resource is None:
        return None
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0


def random_tile(n_bands: int, size: int = 512, seed: int = 0) -> TileSample:
    if not 1 <= n_bands <= len(SENTINEL2_VNIR):
        raise ValueError(f"bands must be in 1..{len(SENTINEL2_VNIR)}")
    rng = np.random.default_rng(seed)
    bands = rng.uniform(0.0, 1.0, (n_bands, size, size)).astype(np.float32)
    return TileSample(bands, SENTINEL2_VNIR[:n_bands])


def time_variant(name: str, n_bands: int, size: int = 512, iterations: int = 10, warmup: int = 3,
                 seed: int = 0) -> BenchReport:
    if iterations < 10 or warmup < 3:
        raise ValueError("need >= 10 iterations after >= 3 warmup runs")
    config = VARIANTS[name]
    params = init_encoder(config, seed)
    tile = random_tile(n_bands, size, seed)

    def run():
        with _single_thread():
            for _ in range(warmup):
                encoder_forward(tile, params, config)
            times = []
            for _ in range(iterations):
                t0 = time.perf_counter()
                encoder_forward(tile, params, config)
                times.append((time.perf_counter() - t0) * 1e3)
        return np.array(times)

    times = run()
    med = float(np.median(times))
    return BenchReport(name, n_bands, size, size, iterations, warmup, med, float(times.min()),
                       float(times.max()), 1000.0 / med, _peak_rss_mb())


def bench_encoder(variants: Sequence[str] = ("fast-sensei",), bands: Sequence[int] = (1, 5, 10), size: int = 512,
                  iterations: int = 10, warmup: int = 3) -> list[BenchReport]:
    return [time_variant(v, b, size, iterations, warmup) for v in variants for b in bands]


def _single_thread():
    return threadpool_limits(1) if threadpool_limits is not None else contextlib.nullcontext()
