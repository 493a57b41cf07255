"""Inverse-compositional Lucas-Kanade search for horizontal patch disparity.

Disparity is purely horizontal (rectified input), so the Jacobian is the
per-pixel x-gradient of the left template and the Hessian is a scalar. Both
are computed once per patch; each iteration only re-samples the right image.

Early stopping uses the three parameters ``(0.05, 0.95, 0.10)`` as

* ``good``: stop once the RMS residual falls below this many 8-bit gray
  levels, i.e. ``mse < (good / 255)^2`` on [0, 1] intensities (the update
  computed at that point is still applied). The threshold is absolute, as in
  DIS, which works on 0..255 images; a threshold relative to the template
  energy would stop smooth patches tenths of a pixel short of the optimum;
* ``hopeless_ratio``: a search that ends with a residual above this fraction
  of the template energy is reported as not converged;
* ``min_improvement``: stop when one iteration lowers the residual by less
  than this relative amount.

The meaning of these three numbers is our reading of the DIS lineage; they
are not defined precisely anywhere else.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .imagepyr import GrayImage, Patch, patch_offsets

UPDATE_EPS = 1e-2
GRAY_LEVELS = 255.0
HESSIAN_EPS = 1e-8
MAX_ITERATIONS = 12
EARLY_STOP = (0.05, 0.95, 0.10)


@dataclass(frozen=True)
class PatchSystem:
    patch: Patch
    jacobian: np.ndarray
    hessian: float
    level: int
    degenerate: bool

    @property
    def xs(self) -> np.ndarray:
        return self.patch.center[0] + patch_offsets(self.patch.size)

    @property
    def ys(self) -> np.ndarray:
        return self.patch.center[1] + patch_offsets(self.patch.size)


@dataclass(frozen=True)
class LKResult:
    u: float
    converged: bool
    iterations: int
    final_residual: float
    initial_residual: float
    status: int


def precompute_patch_system(patch: Patch, gradient, level: int = 0) -> PatchSystem:
    """Sample the x-gradient at the patch pixels and sum its squares.

    ``gradient`` is either a full gradient field (sampled at the patch
    positions) or an array already shaped like the template.
    """
    gradient = np.asarray(gradient, dtype=np.float64)
    if gradient.shape == patch.template.shape:
        jac = np.where(patch.valid, gradient, 0.0)
    else:
        off = patch_offsets(patch.size)
        ys, xs = np.meshgrid(patch.center[1] + off, patch.center[0] + off, indexing="ij")
        jac = np.where(patch.valid, _bilinear_field(gradient, xs, ys), 0.0)
    hessian = float(_kernels.sum_squares(np.ascontiguousarray(jac)))
    return PatchSystem(patch, jac, hessian, level, hessian < HESSIAN_EPS)


def _bilinear_field(field: np.ndarray, xs, ys) -> np.ndarray:
    h, w = field.shape
    xc = np.clip(xs, 0, w - 1)
    yc = np.clip(ys, 0, h - 1)
    x0 = np.minimum(np.floor(xc).astype(np.intp), max(w - 2, 0))
    y0 = np.minimum(np.floor(yc).astype(np.intp), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    ax, ay = xc - x0, yc - y0
    return ((1 - ay) * ((1 - ax) * field[y0, x0] + ax * field[y0, x1])
            + ay * ((1 - ax) * field[y1, x0] + ax * field[y1, x1]))


def good_mse(good: float) -> float:
    """Mean-squared-residual threshold for the ``good`` early-stop value."""
    return (good / GRAY_LEVELS) ** 2


def _min_count(system: PatchSystem, min_valid_ratio: float) -> int:
    n = int(system.patch.valid.sum())
    return max(1, int(np.ceil(min_valid_ratio * n)))


def patch_residual(system: PatchSystem, right: GrayImage, u: float,
                   min_valid_ratio: float = 0.75) -> float:
    """Mean squared mean-normalized residual at disparity ``u`` (inf if unusable)."""
    mse, _, _, _ = _kernels.eval_residual(
        right.data, right.valid, system.patch.template.ravel(), system.patch.valid.ravel(),
        system.jacobian.ravel(), system.xs, system.ys, float(u), _min_count(system, min_valid_ratio))
    return float(mse)


def solve_patch_disparity(system: PatchSystem, right: GrayImage, u_init: float,
                          max_iterations: int = MAX_ITERATIONS, *,
                          update_eps: float = UPDATE_EPS,
                          early_stop: tuple[float, float, float] = EARLY_STOP,
                          min_valid_ratio: float = 0.75) -> LKResult:
    if not np.isfinite(u_init):
        raise ValueError("u_init must be finite")
    if system.degenerate:
        return LKResult(float(u_init), False, 0, np.inf, np.inf, _kernels.DEGENERATE)
    good, hopeless, improve = early_stop
    u, status, it, fres, ires = _kernels.lk_search(
        right.data, right.valid, system.patch.template.ravel(), system.patch.valid.ravel(),
        system.jacobian.ravel(), system.hessian, system.xs, system.ys, float(u_init),
        int(max_iterations), update_eps, good_mse(good), hopeless, improve,
        _min_count(system, min_valid_ratio))
    return LKResult(float(u), status == _kernels.CONVERGED, int(it), float(fres), float(ires),
                    int(status))
