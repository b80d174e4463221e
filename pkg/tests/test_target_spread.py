import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lpnet.errors import ConfigError, DataError
from lpnet.target_spread import (GaussianLowPassSpec, centered_frequencies,
                                 filtered_ground_truth, gaussian_lowpass_mask, target_spread_map)
from oracles import circular_spread


def test_centered_frequencies():
    np.testing.assert_array_equal(centered_frequencies(5), [-2, -1, 0, 1, 2])
    np.testing.assert_array_equal(centered_frequencies(4), [-2, -1, 0, 1])


def test_default_sigma_is_width_over_eight():
    assert GaussianLowPassSpec.default(120, 120).sigma == 15.0


@pytest.mark.parametrize("sigma", [0.0, -1.0])
def test_bad_sigma(sigma):
    with pytest.raises(ConfigError):
        GaussianLowPassSpec(sigma, 8, 8)


def test_mask_peak_at_dc():
    g = gaussian_lowpass_mask(GaussianLowPassSpec(2.0, 9, 7))
    assert g[4, 3] == 1.0
    assert g.max() == 1.0
    # one step along each axis
    assert g[5, 3] == pytest.approx(np.exp(-1 / 8))


def test_all_zero_gt_rejected():
    with pytest.raises(DataError):
        target_spread_map(np.zeros((6, 6)))


def test_shape_mismatch():
    with pytest.raises(ConfigError):
        filtered_ground_truth(np.ones((4, 4)), GaussianLowPassSpec(1.0, 5, 5))


def test_single_pixel_oracle_120():
    gt = np.zeros((120, 120))
    gt[37, 81] = 1
    spec = GaussianLowPassSpec.default(120, 120)
    np.testing.assert_allclose(target_spread_map(gt, spec), circular_spread(gt, 15.0), atol=1e-12)


@pytest.mark.parametrize("n", [31, 120])
def test_centered_pixel_symmetry(n):
    gt = np.zeros((n, n))
    c = n // 2
    gt[c, c] = 1
    m = target_spread_map(gt)
    assert np.unravel_index(m.argmax(), m.shape) == (c, c)
    # circular reflection about the target pixel
    idx = (2 * c - np.arange(n)) % n
    np.testing.assert_allclose(m, m[idx][:, idx], atol=1e-15)
    np.testing.assert_allclose(m, m.T, atol=1e-15)


def test_spatial_extent_of_default_filter():
    # the default sigma is in frequency units; its spatial spread is n / (2 pi sigma)
    gt = np.zeros((120, 120))
    gt[60, 60] = 1
    f = filtered_ground_truth(gt, GaussianLowPassSpec.default(120, 120))
    prof = f[60]
    d = np.arange(120) - 60
    sigma_s = np.sqrt((prof * d ** 2).sum() / prof.sum())
    assert sigma_s == pytest.approx(120 / (2 * np.pi * 15), rel=1e-3)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.integers(4, 24), st.integers(4, 24),
       st.floats(0.5, 12.0))
def test_spread_properties(seed, h, w, sigma):
    rng = np.random.default_rng(seed)
    gt = rng.random((h, w)) < 0.1
    gt[rng.integers(h), rng.integers(w)] = True
    m = target_spread_map(gt, GaussianLowPassSpec(sigma, h, w))
    assert m.shape == (h, w)
    assert m.min() >= 0
    assert abs(m.sum() - 1) < 1e-9


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.integers(0, 15), st.integers(0, 15))
def test_translation_equivariance(seed, di, dj):
    rng = np.random.default_rng(seed)
    gt = rng.random((16, 16)) < 0.05
    gt[3, 4] = True
    spec = GaussianLowPassSpec(3.0, 16, 16)
    a = target_spread_map(np.roll(gt, (di, dj), axis=(0, 1)), spec)
    b = np.roll(target_spread_map(gt, spec), (di, dj), axis=(0, 1))
    np.testing.assert_allclose(a, b, atol=1e-14)


def test_linearity_before_normalization():
    rng = np.random.default_rng(3)
    a, b = rng.random((10, 12)), rng.random((10, 12))
    spec = GaussianLowPassSpec(2.5, 10, 12)
    np.testing.assert_allclose(filtered_ground_truth(a + 2 * b, spec),
                               filtered_ground_truth(a, spec) + 2 * filtered_ground_truth(b, spec),
                               atol=1e-12)
