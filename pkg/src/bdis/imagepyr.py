"""Grayscale conversion, coarse-to-fine pyramids and mean-normalized patches."""
from __future__ import annotations

from dataclasses import dataclass, field
from math import ceil

import numpy as np

LUMA_WEIGHTS = (0.299, 0.587, 0.114)


@dataclass(frozen=True)
class GrayImage:
    """Row-major intensity image in [0, 1] with a per-pixel validity mask."""

    data: np.ndarray
    valid: np.ndarray = field(default=None)

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float64)
        if data.ndim != 2 or data.size == 0:
            raise ValueError(f"expected a non-empty 2-D image, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("image contains non-finite values")
        if data.min() < 0.0 or data.max() > 1.0:
            raise ValueError("intensities must lie in [0, 1]")
        valid = self.valid
        if valid is None:
            valid = np.ones(data.shape, dtype=bool)
        valid = np.ascontiguousarray(valid, dtype=bool)
        if valid.shape != data.shape:
            raise ValueError("validity mask shape does not match image")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "valid", valid)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape


@dataclass(frozen=True)
class PyramidLevel:
    index: int
    left: GrayImage
    right: GrayImage
    grad_x: np.ndarray


@dataclass(frozen=True)
class Pyramid:
    """Levels ordered coarsest first; level ``n`` is the input downscaled by 2**n."""

    levels: list[PyramidLevel]
    coarsest_exp: int
    finest_exp: int

    def __getitem__(self, n: int) -> PyramidLevel:
        for lvl in self.levels:
            if lvl.index == n:
                return lvl
        raise KeyError(n)


@dataclass(frozen=True)
class Patch:
    center: tuple[float, float]
    size: int
    template: np.ndarray
    mean: float
    valid_fraction: float
    valid: np.ndarray


def to_grayscale(rgb, mask=None) -> GrayImage:
    """Rec.601 luma of an 8-bit gray or RGB(A) raster, scaled to [0, 1].

    A fourth (alpha) channel marks pixels with zero alpha as invalid. An
    explicit ``mask`` overrides that.
    """
    arr = np.asarray(rgb)
    if arr.size == 0 or arr.ndim not in (2, 3) or min(arr.shape[:2]) < 1:
        raise ValueError("empty image")
    valid = None
    if arr.ndim == 2:
        gray = arr.astype(np.float64) / 255.0
    else:
        if arr.shape[2] == 4:
            valid = arr[..., 3] > 0
            arr = arr[..., :3]
        if arr.shape[2] == 1:
            gray = arr[..., 0].astype(np.float64) / 255.0
        elif arr.shape[2] == 3:
            rgbf = arr.astype(np.float64)
            gray = (LUMA_WEIGHTS[0] * rgbf[..., 0] + LUMA_WEIGHTS[1] * rgbf[..., 1]
                    + LUMA_WEIGHTS[2] * rgbf[..., 2]) / 255.0
        else:
            raise ValueError(f"unsupported channel count {arr.shape[2]}")
    if mask is not None:
        valid = np.asarray(mask, dtype=bool)
    return GrayImage(np.clip(gray, 0.0, 1.0), valid)


def downsample(image: GrayImage) -> GrayImage:
    """2x2 box average to ceil(W/2) x ceil(H/2); odd borders replicate the edge."""
    h, w = image.shape
    ph, pw = h + (h & 1), w + (w & 1)
    data = np.pad(image.data, ((0, ph - h), (0, pw - w)), mode="edge")
    valid = np.pad(image.valid, ((0, ph - h), (0, pw - w)), mode="edge")
    out = 0.25 * (data[0::2, 0::2] + data[1::2, 0::2] + data[0::2, 1::2] + data[1::2, 1::2])
    ok = valid[0::2, 0::2] & valid[1::2, 0::2] & valid[0::2, 1::2] & valid[1::2, 1::2]
    return GrayImage(np.clip(out, 0.0, 1.0), ok)


def gradient_x(data: np.ndarray) -> np.ndarray:
    """Central differences along x, one-sided at the left/right borders."""
    g = np.zeros_like(data, dtype=np.float64)
    if data.shape[1] < 2:
        return g
    g[:, 1:-1] = 0.5 * (data[:, 2:] - data[:, :-2])
    g[:, 0] = data[:, 1] - data[:, 0]
    g[:, -1] = data[:, -1] - data[:, -2]
    return g


def level_shape(width: int, height: int, n: int) -> tuple[int, int]:
    """(width, height) of pyramid level ``n`` for a width x height input."""
    for _ in range(n):
        width, height = ceil(width / 2), ceil(height / 2)
    return width, height


def build_pyramid(left: GrayImage, right: GrayImage, coarsest_exp: int, finest_exp: int,
                  patch_size: int = 1) -> Pyramid:
    if left.shape != right.shape:
        raise ValueError(f"stereo images differ in size: {left.shape} vs {right.shape}")
    if not 0 <= finest_exp <= coarsest_exp:
        raise ValueError("need 0 <= finest_exp <= coarsest_exp")
    cw, ch = level_shape(left.width, left.height, coarsest_exp)
    if cw < patch_size or ch < patch_size:
        raise ValueError(f"coarsest level {cw}x{ch} is smaller than the patch size {patch_size}")

    levels = []
    cur_l, cur_r = left, right
    for n in range(coarsest_exp + 1):
        if n >= finest_exp:
            levels.append(PyramidLevel(n, cur_l, cur_r, gradient_x(cur_l.data)))
        if n < coarsest_exp:
            cur_l, cur_r = downsample(cur_l), downsample(cur_r)
    levels.reverse()
    return Pyramid(levels, coarsest_exp, finest_exp)


def bilinear(image: GrayImage, xs: np.ndarray, ys: np.ndarray):
    """Sample at sub-pixel positions with border clamping.

    Returns ``(values, valid)``; a sample is valid when it lies inside the
    image and every source pixel with non-zero weight is valid.
    """
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    h, w = image.shape
    inside = (xs >= 0) & (xs <= w - 1) & (ys >= 0) & (ys <= h - 1)
    xc = np.clip(xs, 0, w - 1)
    yc = np.clip(ys, 0, h - 1)
    x0 = np.minimum(np.floor(xc).astype(np.intp), max(w - 2, 0))
    y0 = np.minimum(np.floor(yc).astype(np.intp), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    ax = xc - x0
    ay = yc - y0
    d, v = image.data, image.valid
    vals = ((1 - ay) * ((1 - ax) * d[y0, x0] + ax * d[y0, x1])
            + ay * ((1 - ax) * d[y1, x0] + ax * d[y1, x1]))
    ok = (inside
          & (v[y0, x0] | ((1 - ax) * (1 - ay) == 0))
          & (v[y0, x1] | (ax * (1 - ay) == 0))
          & (v[y1, x0] | ((1 - ax) * ay == 0))
          & (v[y1, x1] | (ax * ay == 0)))
    return vals, ok


def patch_offsets(size: int) -> np.ndarray:
    """Pixel offsets of a size-wide patch from its geometric center."""
    return np.arange(size, dtype=np.float64) - (size - 1) / 2.0


def extract_patch(image: GrayImage, center, size: int) -> Patch:
    """Mean-normalized ``size`` x ``size`` patch around a sub-pixel center."""
    cx, cy = float(center[0]), float(center[1])
    off = patch_offsets(size)
    ys, xs = np.meshgrid(cy + off, cx + off, indexing="ij")
    vals, ok = bilinear(image, xs, ys)
    count = int(ok.sum())
    if count == 0:
        raise ValueError(f"patch at ({cx}, {cy}) has no valid pixels")
    mean = float(vals[ok].mean())
    template = np.where(ok, vals - mean, 0.0)
    return Patch((cx, cy), size, template, mean, count / (size * size), ok)
