import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bdis.bayesprob import (WINDOW_OFFSETS, WindowSamples, batch_posteriors, dynamic_sigma,
                            fast_exp, patch_posterior, retained_posterior, sample_window)
from bdis.fastlk import precompute_patch_system
from bdis.imagepyr import GrayImage, extract_patch, gradient_x

from conftest import shifted_pair

OFFS = np.array(WINDOW_OFFSETS)


def window(res, valid=None):
    res = np.asarray(res, dtype=float)
    return WindowSamples(OFFS, res, np.ones(5, bool) if valid is None else np.asarray(valid), 2)


def _system(img, cx=40.0, cy=19.5):
    return precompute_patch_system(extract_patch(img, (cx, cy), 10), gradient_x(img.data))


def test_identical_images_window():
    left, _ = shifted_pair(40, 80, 0.0)
    w = sample_window(_system(left), left, 0.0)
    assert w.residuals[2] == pytest.approx(0.0, abs=1e-20)
    assert np.all(np.delete(w.residuals, 2) > 0)


def test_textureless_window_is_flat():
    img = GrayImage(np.full((40, 80), 0.4))
    w = sample_window(_system(img), img, 0.0)
    assert np.allclose(w.residuals, w.residuals[0], atol=1e-20)


def test_shift_three_window_has_center_minimum():
    left, right = shifted_pair(40, 80, 3.0, seed=6)
    s = _system(left)
    w = sample_window(s, right, 3.0)
    # brute-force sweep of the same residual on a fine grid around the shift
    from test_fastlk import brute_residual
    sweep = {o: brute_residual(s, right, 3.0 + o) for o in WINDOW_OFFSETS}
    assert all(sweep[0.0] < sweep[o] for o in WINDOW_OFFSETS if o != 0.0)
    assert np.all(w.residuals[2] < np.delete(w.residuals, 2))
    assert np.allclose(w.residuals, [sweep[o] for o in WINDOW_OFFSETS], atol=1e-9)


def test_window_rejected_with_two_invalid_samples():
    left, right = shifted_pair(40, 80, 0.0)
    s = _system(left, cx=4.5)
    # pushing left by 0.5 and 1 px moves 0.5*10 / 1*10 pixels off... make both fail
    assert sample_window(s, right, -3.0) is None


def test_dynamic_sigma_examples():
    assert dynamic_sigma([0.1] * 5) == 1e-4
    assert dynamic_sigma([0, 1, 2, 3, 4]) == pytest.approx(math.sqrt(2))
    assert dynamic_sigma([0, 0, 0, 0, 1]) == pytest.approx(0.4)


def test_uniform_window_probability():
    post = patch_posterior(window([0.3] * 5), 1e-4, 10)
    assert post.probability == pytest.approx(0.2, abs=1e-12)
    assert not post.is_local_minimum
    assert retained_posterior(window([0.3] * 5), 10) is None


def test_infinitely_worse_neighbours_give_one():
    post = patch_posterior(window([1e6, 1e6, 0, 1e6, 1e6]), 1.0, 1)
    assert post.probability == 1.0


def test_closed_form_window_probability():
    # 1 / (1 + 2 e^-1/2 + 2 e^-1) evaluates to 0.3391, not the 0.412 quoted in the requirements
    oracle = 1 / (1 + 2 * math.exp(-0.5) + 2 * math.exp(-1.0))
    assert oracle == pytest.approx(0.33912, abs=1e-5)
    # exponent = -res / (2 sigma^2 s^2) = -res / 2  with sigma * s = 1
    post = patch_posterior(window([2, 1, 0, 1, 2]), 0.1, 10, exp=np.exp)
    assert post.probability == pytest.approx(oracle, abs=1e-12)
    fast = patch_posterior(window([2, 1, 0, 1, 2]), 0.1, 10)
    assert fast.probability == pytest.approx(oracle, rel=0.08)


def test_fast_exp_examples():
    assert fast_exp(0.0) == pytest.approx(1.0, rel=0.04)
    assert fast_exp(-1.0) == pytest.approx(math.exp(-1.0), rel=0.04)
    assert fast_exp(-40.0) == 0.0


def test_fast_exp_error_bound_dense(rng):
    x = rng.uniform(-30, 0, 100_000)
    rel = np.abs(fast_exp(x) - np.exp(x)) / np.exp(x)
    assert rel.max() <= 0.04


def test_fast_exp_scalar_and_array_agree():
    xs = np.linspace(-29, 0, 50)
    assert np.array_equal(fast_exp(xs), [fast_exp(float(v)) for v in xs])


def test_sigma_must_be_positive():
    with pytest.raises(ValueError):
        patch_posterior(window([0, 1, 2, 3, 4]), 0.0, 10)


def test_window_offsets_must_be_symmetric():
    with pytest.raises(ValueError):
        WindowSamples(np.array([-1.0, 0.0, 0.5]), np.zeros(3), np.ones(3, bool), 1)


res_st = st.lists(st.floats(0, 10, allow_nan=False), min_size=5, max_size=5)


@settings(max_examples=1000)
@given(res_st, st.floats(0.01, 5))
def test_window_probabilities_sum_to_one_exact_exp(res, sigma):
    post = patch_posterior(window(res), sigma, 1, exp=np.exp)
    if post is None:
        return
    p = post.priors / post.priors.sum()
    assert p.sum() == pytest.approx(1.0, abs=1e-6)
    assert 0.0 <= post.probability <= 1.0


@settings(max_examples=1000)
@given(res_st, st.floats(0.05, 5))
def test_window_sum_with_fast_exp_within_8_percent(res, sigma):
    s = 1
    exact = np.exp(-np.asarray(res) / (2 * sigma ** 2 * s ** 2))
    if exact.sum() < 1e-12:
        return
    fast = fast_exp(-np.asarray(res) / (2 * sigma ** 2 * s ** 2))
    assert abs((fast / exact.sum()).sum() - 1.0) <= 0.08


@settings(max_examples=1000)
@given(res_st, st.floats(0.05, 3), st.floats(0.01, 100))
def test_scaling_residuals_and_variance_together(res, sigma, k):
    a = patch_posterior(window(res), sigma, 10, exp=np.exp)
    b = patch_posterior(window(np.asarray(res) * k), sigma * math.sqrt(k), 10, exp=np.exp)
    if a is None or b is None:
        return
    assert b.probability == pytest.approx(a.probability, abs=1e-6)


@settings(max_examples=200)
@given(st.lists(st.floats(0, 5, allow_nan=False), min_size=5, max_size=5))
def test_posterior_exists_iff_center_strict_min(values):
    for perm in set(itertools.permutations(values)):
        w = window(perm)
        post = retained_posterior(w, 10)
        strict = all(perm[2] < v for i, v in enumerate(perm) if i != 2)
        if strict:
            assert post is not None
        else:
            assert post is None


def test_batch_matches_scalar(rng):
    res = rng.random((300, 5))
    valid = rng.random((300, 5)) > 0.05
    prob, sigma, priors, keep = batch_posteriors(res, valid, 2, 10)
    for i in range(300):
        w = WindowSamples(OFFS, res[i], valid[i], 2)
        scalar = None if (~valid[i]).sum() > 1 else retained_posterior(w, 10)
        assert keep[i] == (scalar is not None)
        if scalar is not None:
            assert prob[i] == pytest.approx(scalar.probability, abs=1e-12)
            assert sigma[i] == pytest.approx(scalar.sigma_r, abs=1e-12)
