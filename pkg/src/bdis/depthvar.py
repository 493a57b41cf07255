"""Depth conversion, validity filtering and the optional per-patch variance fit.

The variance fit treats the window priors of a patch as samples of a scaled
Gaussian ``c * exp(-d^2 / (2 sigma^2))`` centred on the LK disparity and fits
``(ln c, sigma)`` by Gauss-Newton in the log domain. The usual
``1 / (sigma sqrt(2 pi))`` factor is folded into ``c``, so ``c`` is a free
scale and not a calibrated density height. The solver state is ``(ln c, tau)``
with ``tau = 1 / (2 sigma^2)``. Windows that do not look Gaussian
get a large fallback deviation instead of a fitted one.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy import ndimage

SIGMA_INIT = np.sqrt(0.1)
GN_ITERATIONS = 10
FIT_RESIDUAL_MAX = 0.1
FLAT_TOLERANCE = 1e-3
SIGMA_FALLBACK = 2.0
MIN_DISPARITY = 0.1


@dataclass(frozen=True)
class CameraParams:
    focal_px: float
    baseline: float

    def __post_init__(self):
        if not (self.focal_px > 0 and self.baseline > 0):
            raise ValueError("focal length and baseline must be positive")

    @property
    def fb(self) -> float:
        return self.focal_px * self.baseline


@dataclass(frozen=True)
class DisparityField:
    values: np.ndarray
    valid: np.ndarray

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True)
class DepthResult:
    depth: np.ndarray
    valid: np.ndarray
    sigma: np.ndarray | None = None


class Rejection(str, Enum):
    NONE = "none"
    RESIDUAL_TOO_LARGE = "residual_too_large"
    NOT_GAUSSIAN = "not_gaussian"
    UNCONVERGED = "unconverged"


_NOT_GAUSSIAN, _TOO_LARGE = 1, 2
_BY_CODE = (Rejection.NONE, Rejection.NOT_GAUSSIAN, Rejection.RESIDUAL_TOO_LARGE)


@dataclass(frozen=True)
class PatchVariance:
    sigma_k: float
    c_k: float
    accepted: bool
    rejection_reason: Rejection
    fit_residual: float


def disparity_to_depth(disparity: DisparityField, cam: CameraParams,
                       min_disparity: float = MIN_DISPARITY) -> DepthResult:
    d = np.asarray(disparity.values, dtype=np.float64)
    valid = np.asarray(disparity.valid, dtype=bool) & np.isfinite(d) & (d > min_disparity)
    depth = np.zeros_like(d)
    np.divide(cam.fb, d, out=depth, where=valid)
    return DepthResult(depth, valid)


def depth_to_disparity(depth: DepthResult, cam: CameraParams) -> DisparityField:
    disp = np.zeros_like(depth.depth)
    np.divide(cam.fb, depth.depth, out=disp, where=depth.valid)
    return DisparityField(disp, depth.valid.copy())


def filter_validity(disparity: DisparityField, probability: np.ndarray, gamma: float,
                    pixel_threshold: float, patch_pixels: int = 100) -> DisparityField:
    """Drop low-probability pixels, then valid islands smaller than ``gamma * patch_pixels``."""
    valid = disparity.valid & (np.asarray(probability) >= pixel_threshold)
    min_size = gamma * patch_pixels
    if min_size > 0 and valid.any():
        labels, n = ndimage.label(valid)
        sizes = np.bincount(labels.ravel(), minlength=n + 1)
        small = sizes < min_size
        small[0] = False
        valid &= ~small[labels]
    return DisparityField(np.where(valid, disparity.values, 0.0), valid)


def _gn_fit(offsets: np.ndarray, log_p: np.ndarray, weights: np.ndarray,
            sigma0: float, iterations: int):
    """Batched weighted Gauss-Newton for rows of ``ln p ~ ln c - tau d^2``, ``tau = 1 / (2 sigma^2)``.

    With ``weights = p^2`` the log residuals approximate the linear ones, so
    near-zero samples barely pull on the fit.
    In ``(ln c, tau)`` the log model is linear, so the first step lands on the
    least-squares optimum and later steps are no-ops; parametrising by sigma
    instead overshoots to negative values whenever the true sigma is well below
    ``sigma0``. Each 2x2 normal system is solved by an explicit Cholesky
    factorisation. Returns ``(ln_c, sigma, log_cost, ok)``.
    """
    n = log_p.shape[0]
    d2 = np.broadcast_to(offsets ** 2, log_p.shape)
    w = np.asarray(weights, dtype=np.float64)
    lp = np.where(w > 0, log_p, 0.0)
    lc = np.zeros(n)
    tau = np.full(n, 1.0 / (2.0 * sigma0 ** 2))
    ok = np.ones(n, dtype=bool)
    # normal matrix [[a, -b], [-b, c]] is constant: J = [1, -d^2]
    a = w.sum(axis=1)
    b = (w * d2).sum(axis=1)
    c = (w * d2 * d2).sum(axis=1)
    with np.errstate(all="ignore"):
        l11 = np.sqrt(a)
        l21 = -b / l11
        l22sq = c - l21 ** 2
        ok &= (a > 0) & np.isfinite(l22sq) & (l22sq > 1e-12 * np.maximum(c, 1e-300))
        l22 = np.sqrt(np.where(ok, l22sq, 1.0))
        for _ in range(iterations):
            r = (lc[:, None] - tau[:, None] * d2 - lp) * w
            g0 = r.sum(axis=1)
            g1 = -(d2 * r).sum(axis=1)
            # forward then back substitution for (L L^T) step = -g
            z0 = -g0 / l11
            z1 = (-g1 - l21 * z0) / l22
            step1 = z1 / l22
            step0 = (z0 - l21 * step1) / l11
            lc = np.where(ok, lc + step0, lc)
            tau = np.where(ok, tau + step1, tau)
            ok &= np.isfinite(lc) & np.isfinite(tau)
        r = lc[:, None] - tau[:, None] * d2 - lp
        cost = (w * r * r).sum(axis=1)
        ok &= np.isfinite(cost) & (tau > 0)
        sigma = np.where(ok, np.sqrt(1.0 / (2.0 * np.where(ok, tau, 1.0))), np.nan)
    return lc, sigma, cost, ok


def fit_window_variances(offsets, priors, usable=None, *, sigma_fallback: float = SIGMA_FALLBACK,
                         sigma0: float = SIGMA_INIT, iterations: int = GN_ITERATIONS,
                         residual_max: float = FIT_RESIDUAL_MAX,
                         flat_tol: float = FLAT_TOLERANCE):
    """Vectorised variance fit over rows of window priors.

    Returns ``(sigma_k, c_k, reason, fit_cost)`` where ``reason`` holds
    ``Rejection`` values and rejected rows carry ``sigma_fallback``.
    ``fit_cost`` is the linear-domain ``sum (c exp(-d^2 / 2 sigma^2) - p)^2``
    over the usable samples, the quantity compared with ``residual_max``.
    """
    offsets = np.asarray(offsets, dtype=np.float64)
    priors = np.atleast_2d(np.asarray(priors, dtype=np.float64))
    if usable is None:
        usable = np.ones(priors.shape, dtype=bool)
    usable = np.atleast_2d(usable) & np.isfinite(priors) & (priors >= 0)
    positive = usable & (priors > 0)
    center = int(np.flatnonzero(offsets == 0)[0])
    n = priors.shape[0]
    # integer codes while masking; numpy mangles str-enum members in arrays
    code = np.zeros(n, dtype=np.int8)

    pc = priors[:, center]
    others = np.where(usable, priors, -np.inf)
    others[:, center] = -np.inf
    pmax = np.where(usable, priors, -np.inf).max(axis=1)
    pmin = np.where(usable, priors, np.inf).min(axis=1)
    flat = (pmax - pmin) <= flat_tol * np.abs(pmax)
    off_center = ~(usable[:, center] & (pc > others.max(axis=1)))
    too_few = positive.sum(axis=1) < 3
    code[flat | off_center | too_few] = _NOT_GAUSSIAN

    log_p = np.log(np.where(positive, priors, 1.0))
    lc, sigma, _, ok = _gn_fit(offsets, log_p, np.where(positive, priors ** 2, 0.0), sigma0,
                               iterations)
    with np.errstate(all="ignore"):
        model = np.exp(lc[:, None] - offsets ** 2 / (2.0 * sigma[:, None] ** 2))
        cost = np.where(usable, (model - priors) ** 2, 0.0).sum(axis=1)
    ok &= np.isfinite(cost)
    code[(code == 0) & ~ok] = _NOT_GAUSSIAN
    code[(code == 0) & (cost > residual_max)] = _TOO_LARGE
    accepted = code == 0
    reason = np.empty(n, dtype=object)
    for k in range(n):
        reason[k] = _BY_CODE[code[k]]
    sigma_k = np.where(accepted, sigma, sigma_fallback)
    c_k = np.where(accepted, np.exp(lc), np.nan)
    return sigma_k, c_k, reason, cost


def estimate_patch_variance(samples, priors, u_k: float = 0.0, *, converged: bool = True,
                            sigma_fallback: float = SIGMA_FALLBACK) -> PatchVariance:
    """Fit a Gaussian to one window of priors around ``u_k``.

    ``samples`` is a ``WindowSamples`` (or a bare offset array); offsets are
    measured from ``u_k`` already.
    """
    if not converged or samples is None:
        return PatchVariance(sigma_fallback, float("nan"), False, Rejection.UNCONVERGED, float("nan"))
    offsets = getattr(samples, "offsets", samples)
    usable = getattr(samples, "valid", None)
    sigma, c, reason, cost = fit_window_variances(
        offsets, priors, None if usable is None else usable[None, :], sigma_fallback=sigma_fallback)
    r = reason[0]
    return PatchVariance(float(sigma[0]), float(c[0]), r == Rejection.NONE, r, float(cost[0]))


def propagate_variance(sigma_k, weights, disparity: float, cam: CameraParams) -> float:
    """Depth standard deviation at one pixel from its contributing patches.

    ``weights`` are normalized to sum 1 before use; ``disparity`` and
    ``sigma_k`` share pixel units, the result is in depth units.
    """
    if not (np.isfinite(disparity) and disparity > 0):
        raise ValueError("pixel disparity must be positive")
    w = np.asarray(weights, dtype=np.float64)
    w = w / w.sum()
    s = np.asarray(sigma_k, dtype=np.float64)
    return float(cam.fb / disparity ** 2 * np.sqrt(np.sum(w * w * s * s)))


def depth_sigma_field(disparity: DisparityField, disparity_var: np.ndarray,
                      cam: CameraParams) -> np.ndarray:
    """Per-pixel depth deviation from the fused disparity variance field."""
    sigma = np.full(disparity.shape, np.nan)
    v = disparity.valid & (disparity.values > 0)
    sigma[v] = cam.fb / disparity.values[v] ** 2 * np.sqrt(disparity_var[v])
    return sigma
