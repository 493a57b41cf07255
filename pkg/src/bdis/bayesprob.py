"""Window-normalized patch posterior with a Boltzmann prior over residuals.

For a converged patch the mean-normalized residual is re-evaluated at a few
disparity offsets around the LK solution. Each residual becomes a prior
``exp(-res / (2 sigma_r^2 s^2))`` and the patch probability is the centre
prior divided by the window sum. ``sigma_r`` is the spread of the window
residuals themselves, so no scale has to be tuned by hand.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .fastlk import PatchSystem, _min_count
from .imagepyr import GrayImage

WINDOW_OFFSETS = (-1.0, -0.5, 0.0, 0.5, 1.0)
SIGMA_FLOOR = 1e-4
EXP_CUTOFF = -30.0

# Schraudolph-style exp: write a*x + b straight into the high word of an
# IEEE-754 double. The shift minimises the maximum relative error (~3%).
_EXP_A = 2.0 ** 20 / np.log(2.0)
_EXP_B = 1023 * 2 ** 20
_EXP_SHIFT = 45799


@dataclass(frozen=True)
class WindowSamples:
    offsets: np.ndarray
    residuals: np.ndarray
    valid: np.ndarray
    center_index: int

    def __post_init__(self):
        if not np.allclose(self.offsets, -self.offsets[::-1]) or self.offsets[self.center_index] != 0:
            raise ValueError("window offsets must be symmetric and contain 0 at center_index")


@dataclass(frozen=True)
class PatchPosterior:
    probability: float
    sigma_r: float
    is_local_minimum: bool
    priors: np.ndarray


def fast_exp(x):
    """Approximate ``exp(x)`` for ``x <= 0`` by exponent-field manipulation.

    Relative error stays below 3% on [-30, 0]; inputs below -30 map to 0.
    Accepts scalars or arrays.
    """
    xa = np.asarray(x, dtype=np.float64)
    hi = (_EXP_A * np.maximum(xa, EXP_CUTOFF) + (_EXP_B - _EXP_SHIFT)).astype(np.int64)
    out = (hi << 32).view(np.float64)
    out = np.where(xa < EXP_CUTOFF, 0.0, out)
    return float(out) if out.ndim == 0 else out


def sample_window(system: PatchSystem, right: GrayImage, u_k: float,
                  offsets=WINDOW_OFFSETS, min_valid_ratio: float = 0.75) -> WindowSamples | None:
    """Residuals at ``u_k + offset`` along the epipolar line.

    Returns ``None`` when more than one sample falls outside the valid image.
    """
    offs = np.asarray(offsets, dtype=np.float64)
    res = np.empty(offs.size)
    ok = np.empty(offs.size, dtype=bool)
    _kernels.window_residuals(
        right.data, right.valid, system.patch.template.ravel(), system.patch.valid.ravel(),
        system.jacobian.ravel(), system.xs, system.ys, float(u_k), offs,
        _min_count(system, min_valid_ratio), res, ok)
    if (~ok).sum() > 1:
        return None
    return WindowSamples(offs, res, ok, int(np.flatnonzero(offs == 0)[0]))


def dynamic_sigma(samples, floor: float = SIGMA_FLOOR) -> float:
    """Population standard deviation of the valid window residuals, floored."""
    if isinstance(samples, WindowSamples):
        res = samples.residuals[samples.valid]
    else:
        res = np.asarray(samples, dtype=np.float64)
    if res.size < 2:
        raise ValueError("need at least two valid window samples")
    return max(float(np.std(res)), floor)


def window_priors(residuals, sigma_r: float, patch_size: int, exp=fast_exp) -> np.ndarray:
    return exp(-np.asarray(residuals, dtype=np.float64) / (2.0 * sigma_r ** 2 * patch_size ** 2))


def patch_posterior(samples: WindowSamples, sigma_r: float, patch_size: int,
                    exp=fast_exp) -> PatchPosterior | None:
    """Centre prior over the window sum.

    Residuals are measured from the window minimum before exponentiating.
    The ratio is unchanged (exactly so with ``np.exp``) and the priors cannot
    all underflow, so a flat window scores 1/5 however large its residuals.
    ``is_local_minimum`` records whether the centre residual is the strict
    minimum among the valid samples. Returns ``None`` when the centre sample
    is invalid or every prior underflows.
    """
    if sigma_r <= 0:
        raise ValueError("sigma_r must be positive")
    res = samples.residuals
    ok = samples.valid
    c = samples.center_index
    if not ok[c]:
        return None
    others = res[ok & (np.arange(res.size) != c)]
    shifted = np.where(ok, res - res[ok].min(), 0.0)
    priors = np.where(ok, window_priors(shifted, sigma_r, patch_size, exp), 0.0)
    total = priors.sum()
    if total <= 0.0:
        return None
    return PatchPosterior(float(priors[c] / total), float(sigma_r),
                          bool(np.all(res[c] < others)), priors)


def retained_posterior(samples: WindowSamples | None, patch_size: int,
                       floor: float = SIGMA_FLOOR, exp=fast_exp) -> PatchPosterior | None:
    """Posterior of a patch that survives the saddle test, else ``None``."""
    if samples is None:
        return None
    post = patch_posterior(samples, dynamic_sigma(samples, floor), patch_size, exp)
    if post is None or not post.is_local_minimum:
        return None
    return post


def batch_posteriors(residuals: np.ndarray, valid: np.ndarray, center_index: int,
                     patch_size: int, floor: float = SIGMA_FLOOR):
    """Vectorised ``dynamic_sigma`` + ``patch_posterior`` over many windows.

    Returns ``(probability, sigma_r, priors, keep)``; rows with ``keep`` false
    carry probability 0.
    """
    n = residuals.shape[0]
    res = np.where(valid, residuals, 0.0)
    nvalid = valid.sum(axis=1)
    cnt = np.maximum(nvalid, 1)
    mean = res.sum(axis=1) / cnt
    var = (np.where(valid, res - mean[:, None], 0.0) ** 2).sum(axis=1) / cnt
    sigma = np.maximum(np.sqrt(var), floor)
    center = res[:, center_index]
    others = np.delete(np.where(valid, res, np.inf), center_index, axis=1)
    strict_min = np.all(center[:, None] < others, axis=1)
    keep = (nvalid >= valid.shape[1] - 1) & valid[:, center_index] & strict_min
    base = np.where(valid, res, np.inf).min(axis=1, keepdims=True)
    base = np.where(np.isfinite(base), base, 0.0)
    priors = np.where(valid, fast_exp(-(res - base) / (2.0 * sigma[:, None] ** 2 * patch_size ** 2)),
                      0.0)
    total = priors.sum(axis=1)
    keep &= total > 0
    prob = np.zeros(n)
    np.divide(priors[:, center_index], total, out=prob, where=keep)
    return prob, sigma, priors, keep
