"""Wavelength encodings and band descriptors, step by step."""
import numpy as np

from fastsensei.descriptor import (
    BandSpec,
    EncodingVariant,
    StatsVariant,
    build_descriptor,
    spectral_encode,
)

FAST, V2 = EncodingVariant.FAST_SENSEI, EncodingVariant.SENSEI_V2

# the fast encoding works on lambda - 400 directly, so 400 nm is the origin
print(spectral_encode(400, 8, FAST))  # [0 1 0 1 ...]

# dimension 0 of the fast encoding oscillates once per 2*pi nm
lam = np.linspace(400, 1000, 6001)
fast0 = np.array([spectral_encode(v, 32, FAST)[0] for v in lam])
v2_0 = np.array([spectral_encode(v, 32, V2)[0] for v in lam])
print("fast dim-0 upward zero crossings:", int((np.diff(np.sign(fast0)) > 0).sum()))
print("v2 dim-0 range over the VNIR:", v2_0.min().round(3), "to", v2_0.max().round(3))

# so neighbouring bands get clearly different codes
red, nir = BandSpec(630, 680), BandSpec(845, 885)
e_red = spectral_encode(red.lambda_min_nm, 16, FAST)
e_nir = spectral_encode(nir.lambda_min_nm, 16, FAST)
print("cosine similarity red/nir:", float(e_red @ e_nir / np.linalg.norm(e_red) / np.linalg.norm(e_nir)))

# a descriptor is enc(min) + enc(max) + four statistics of the band image
rng = np.random.default_rng(0)
band = rng.gamma(2.0, 0.08, (64, 64))
d = build_descriptor(red, band)
print(d.shape, "stats (min, max, mean, std):", d[32:].round(4))

d5 = build_descriptor(red, band, stats=StatsVariant.FIVE_PERCENTILE)
print(d5.shape, "percentiles p1..p99:", d5[32:].round(4))

# the statistics ignore pixel order
shuffled = rng.permutation(band.ravel()).reshape(band.shape)
print("order-free:", np.allclose(build_descriptor(red, shuffled), d))
