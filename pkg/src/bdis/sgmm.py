"""Spatial Gaussian confidence mask over patch pixels.

All mixture weights are 1 and the spatial deviation is a fixed
hyper-parameter, so the mask is independent of image content and is built
once per run. It is left unnormalized; fusion normalizes jointly over every
patch covering a pixel.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bayesprob import fast_exp
from .imagepyr import patch_offsets


@dataclass(frozen=True)
class SpatialMask:
    size: int
    weights: np.ndarray
    sigma_s: float


def build_spatial_mask(size: int, sigma_s: float, exp=fast_exp) -> SpatialMask:
    # Even sizes have no pixel at offset 0; the four innermost share the peak.
    if size < 1 or sigma_s <= 0:
        raise ValueError("need size >= 1 and sigma_s > 0")
    off = patch_offsets(size)
    r2 = off[None, :] ** 2 + off[:, None] ** 2
    weights = np.asarray(exp(-r2 / (2.0 * sigma_s ** 2)), dtype=np.float64)
    return SpatialMask(size, weights, float(sigma_s))


def uniform_mask(size: int) -> SpatialMask:
    """Flat mask, used when the spatial weighting is switched off."""
    return SpatialMask(size, np.ones((size, size)), float("inf"))
