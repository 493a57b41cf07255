import math

import numpy as np
import pytest

from bdis.sgmm import build_spatial_mask, uniform_mask


def test_corner_weight_matches_kernel():
    oracle = math.exp(-(4.5 ** 2 + 4.5 ** 2) / (2 * 4 ** 2))
    assert oracle == pytest.approx(0.282, abs=1e-3)
    m = build_spatial_mask(10, 4.0)
    for c in (m.weights[0, 0], m.weights[0, -1], m.weights[-1, 0], m.weights[-1, -1]):
        assert c == pytest.approx(oracle, rel=0.04)


def test_center_weight_odd_size():
    m = build_spatial_mask(5, 4.0)
    assert m.weights[2, 2] == pytest.approx(1.0, rel=0.04)
    assert m.weights[2, 2] == m.weights.max()


def test_large_sigma_is_uniform():
    m = build_spatial_mask(10, 1e6)
    assert np.allclose(m.weights, 1.0, rtol=0.04)
    assert np.ptp(m.weights) < 1e-6


def test_exact_symmetries():
    w = build_spatial_mask(10, 4.0).weights
    assert np.array_equal(w, w[:, ::-1])
    assert np.array_equal(w, w[::-1, :])
    assert np.array_equal(w, w.T)
    assert np.array_equal(w, np.rot90(w))


def test_even_size_four_center_pixels_share_max():
    w = build_spatial_mask(10, 4.0).weights
    assert w[4, 4] == w[4, 5] == w[5, 4] == w[5, 5] == w.max()
    assert (w == w.max()).sum() == 4


def test_radial_monotone_within_tolerance():
    size, sigma = 12, 4.0
    w = build_spatial_mask(size, sigma).weights
    off = np.arange(size) - (size - 1) / 2
    r2 = (off[None, :] ** 2 + off[:, None] ** 2).ravel()
    order = np.argsort(r2, kind="stable")
    vals, rs = w.ravel()[order], r2[order]
    for i in range(len(vals) - 1):
        if rs[i + 1] > rs[i]:
            assert vals[i + 1] <= vals[i] * 1.04


def test_uniform_mask_and_errors():
    assert np.all(uniform_mask(6).weights == 1)
    with pytest.raises(ValueError):
        build_spatial_mask(0, 4.0)
    with pytest.raises(ValueError):
        build_spatial_mask(10, 0.0)
