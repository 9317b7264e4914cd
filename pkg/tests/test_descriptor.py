import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fastsensei.descriptor import (
    PADDING_VALUE,
    BandSpec,
    EncodingVariant,
    StatsVariant,
    band_statistics,
    build_descriptor,
    build_descriptor_batch,
    normalize_wavelength,
    pad_bands,
    spectral_encode,
)

FAST, V2 = EncodingVariant.FAST_SENSEI, EncodingVariant.SENSEI_V2


def test_normalize_wavelength():
    assert normalize_wavelength(400, FAST) == 0
    assert normalize_wavelength(400, V2) == 0
    assert normalize_wavelength(1300, V2) == pytest.approx(1.0, abs=1e-15)
    with pytest.raises(ValueError):
        normalize_wavelength(300, V2)
    with pytest.raises(ValueError):
        normalize_wavelength(0, FAST)


def test_fast_encoding_at_400_is_alternating():
    for d in (2, 4, 16, 32):
        np.testing.assert_array_equal(spectral_encode(400, d, FAST), np.tile([0.0, 1.0], d // 2))


def test_fast_encoding_quarter_period():
    # oracle values from 30-digit mpmath evaluation of sin/cos at pi/2 and pi/200
    enc = spectral_encode(400 + np.pi / 2, 4, FAST)
    np.testing.assert_allclose(enc[[0, 2, 3]], [1.0, 0.015707317311820676, 0.9998766324816606], rtol=1e-12)
    assert abs(enc[1]) < 1e-12


def test_v2_encoding_layout():
    # lambda=1300 normalises to 1; x_i = 1 / 10000**(2i/4) = 1, 1e-2, 1e-4, 1e-6
    # oracle values from 30-digit mpmath evaluation
    enc = spectral_encode(1300, 4, V2)
    np.testing.assert_allclose(
        enc, [0.84147098480789651, 0.99995000041666528, 9.9999999833333333e-5, 0.9999999999995], rtol=1e-12
    )


def test_odd_width_rejected():
    with pytest.raises(ValueError):
        spectral_encode(500, 5, FAST)


@settings(max_examples=100, deadline=None)
@given(st.floats(400, 1000), st.sampled_from([2, 8, 16, 32]))
def test_fast_pairs_share_frequency(lam, d):
    e = spectral_encode(lam, d, FAST)
    np.testing.assert_allclose(e[0::2] ** 2 + e[1::2] ** 2, 1.0, atol=1e-12)
    assert (np.abs(e) <= 1).all()


def test_v2_pairs_do_not_share_frequency():
    e = spectral_encode(700, 16, V2)
    assert np.abs(e[0::2] ** 2 + e[1::2] ** 2 - 1).max() > 1e-3


def test_fast_spans_many_more_cycles():
    lam = np.arange(400, 1001, 1.0)
    fast0 = lam - 400.0
    v2 = np.log10(lam - 300) - 2
    assert (fast0.max() - fast0.min()) / (2 * np.pi) >= 90
    assert (v2.max() - v2.min()) / (2 * np.pi) < 1
    enc_fast = np.array([spectral_encode(x, 16, FAST)[0] for x in lam])
    assert (np.diff(np.sign(enc_fast)) > 0).sum() >= 90  # upward zero crossings = completed cycles


def test_band_statistics_examples():
    np.testing.assert_allclose(band_statistics([[0, 0.5], [1, 0.5]]), [0, 1, 0.5, np.sqrt(0.125)], rtol=1e-15)
    np.testing.assert_array_equal(band_statistics(np.full((3, 4), 0.3125)), [0.3125, 0.3125, 0.3125, 0.0])
    p = band_statistics(np.arange(100) / 99, StatsVariant.FIVE_PERCENTILE)
    # linear interpolation between closest ranks: rank q*(n-1)/100 on 0..99 equals q/100 exactly
    np.testing.assert_allclose(p, [0.01, 0.1, 0.5, 0.9, 0.99], atol=1e-12)
    with pytest.raises(ValueError):
        band_statistics(np.zeros((0,)))


def test_percentile_sorted_array_oracle():
    rng = np.random.default_rng(0)
    x = rng.random(37)
    s = np.sort(x)
    expect = []
    for q in (1, 10, 50, 90, 99):
        r = q / 100 * (len(s) - 1)
        lo = int(np.floor(r))
        hi = min(lo + 1, len(s) - 1)
        expect.append(s[lo] + (r - lo) * (s[hi] - s[lo]))
    np.testing.assert_allclose(band_statistics(x, StatsVariant.FIVE_PERCENTILE), expect, rtol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-0.5, 0.5))
def test_statistics_shift(seed, c):
    x = np.random.default_rng(seed).random((5, 7))
    a, b = band_statistics(x), band_statistics(x + c)
    np.testing.assert_allclose(b[:3], a[:3] + c, atol=1e-12)
    assert b[3] == pytest.approx(a[3], abs=1e-12)


def test_descriptor_at_400_constant_zero_band():
    d = build_descriptor(BandSpec(400, 400), np.zeros((4, 4)))
    assert d.shape == (36,)
    np.testing.assert_array_equal(d[:32], np.tile([0.0, 1.0], 16))
    np.testing.assert_array_equal(d[32:], 0.0)


def test_descriptor_differs_only_in_encoding():
    band = np.random.default_rng(1).random((6, 6))
    a = build_descriptor(BandSpec(450, 500), band)
    b = build_descriptor(BandSpec(640, 680), band)
    assert (a[:32] != b[:32]).any()
    np.testing.assert_array_equal(a[32:], b[32:])


def test_descriptor_permutation_invariant():
    rng = np.random.default_rng(2)
    band = rng.random((8, 8)).astype(np.float32)
    shuffled = rng.permutation(band.reshape(-1)).reshape(8, 8)
    spec = BandSpec(520, 600)
    np.testing.assert_allclose(build_descriptor(spec, shuffled), build_descriptor(spec, band), rtol=0, atol=1e-12)


def test_percentile_descriptor_width():
    d = build_descriptor(BandSpec(500, 520), np.ones((2, 2)), stats=StatsVariant.FIVE_PERCENTILE)
    assert d.shape == (37,)


def test_bandspec_validation():
    with pytest.raises(ValueError):
        BandSpec(600, 500)
    with pytest.raises(ValueError):
        BandSpec(250, 500)
    with pytest.raises(ValueError):
        BandSpec(500, 25000)


SPECS = [BandSpec(433, 453), BandSpec(450, 515), BandSpec(525, 600)]


def test_batch_all_real():
    bands = np.random.default_rng(3).random((3, 4, 4))
    desc, valid = build_descriptor_batch(SPECS, bands, 3)
    assert valid.all()
    assert desc.shape == (3, 36)


def test_batch_padding_rows():
    rng = np.random.default_rng(4)
    bands, specs = pad_bands(rng.random((1, 5, 5)), SPECS[:1], 10)
    assert (bands[1:] == PADDING_VALUE).all()
    desc, valid = build_descriptor_batch(specs, bands, 1)
    assert valid.sum() == 1 and not valid[1:].any()
    np.testing.assert_array_equal(desc[1:], 0.0)


def test_batch_rows_equal_single_band_descriptors():
    rng = np.random.default_rng(5)
    real = rng.random((3, 6, 6)).astype(np.float32)
    bands, specs = pad_bands(real, SPECS, 7)
    desc, _ = build_descriptor_batch(specs, bands, 3)
    for i in range(3):
        np.testing.assert_array_equal(desc[i], build_descriptor(SPECS[i], real[i]))


def test_batch_errors():
    bands = np.zeros((3, 2, 2))
    with pytest.raises(ValueError):
        build_descriptor_batch(SPECS, bands, 0)
    with pytest.raises(ValueError):
        build_descriptor_batch(SPECS, bands, 1)  # padding rows not -0.5
