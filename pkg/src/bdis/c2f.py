"""Coarse-to-fine matching loop with probability propagation and weighted fusion."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numba
import numpy as np

from . import _kernels
from .bayesprob import batch_posteriors
from .config import PipelineConfig
from .fastlk import good_mse
from .depthvar import (CameraParams, DepthResult, DisparityField, depth_sigma_field,
                       disparity_to_depth, filter_validity, fit_window_variances)
from .imagepyr import GrayImage, build_pyramid
from .sgmm import SpatialMask, build_spatial_mask, uniform_mask


@dataclass(frozen=True)
class PatchGrid:
    level: int
    size: int
    x0: np.ndarray
    y0: np.ndarray

    @property
    def centers(self) -> np.ndarray:
        half = (self.size - 1) / 2.0
        return np.column_stack([self.x0 + half, self.y0 + half])

    def __len__(self):
        return self.x0.size


@dataclass
class LevelEstimate:
    level: int
    grid: PatchGrid
    u: np.ndarray
    posterior: np.ndarray
    propagated: np.ndarray
    keep: np.ndarray
    disparity: DisparityField
    probability: np.ndarray
    status: np.ndarray | None = None
    window_priors: np.ndarray | None = None
    weight_sum: np.ndarray | None = None
    disparity_var: np.ndarray | None = None


@dataclass
class MatchResult:
    disparity: DisparityField
    probability: np.ndarray
    levels: list[LevelEstimate]
    depth: DepthResult | None = None
    sigma_disparity: np.ndarray | None = None
    timings: dict = field(default_factory=dict)


def _lattice(extent: int, size: int, stride: int) -> np.ndarray:
    last = extent - size
    pos = list(range(0, last + 1, stride))
    if pos[-1] != last:
        pos.append(last)
    return np.asarray(pos, dtype=np.int64)


def make_patch_grid(width: int, height: int, patch_size: int, overlap: float,
                    level: int = 0) -> PatchGrid:
    """Regular lattice of patch corners; the last row/column is clamped in-image.

    The stride is ``round(size * (1 - overlap))`` with Python's
    round-half-to-even, at least 1.
    """
    if width < patch_size or height < patch_size:
        raise ValueError(f"level {width}x{height} is smaller than the patch size {patch_size}")
    stride = max(1, round(patch_size * (1.0 - overlap)))
    xs = _lattice(width, patch_size, stride)
    ys = _lattice(height, patch_size, stride)
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    return PatchGrid(level, patch_size, gx.ravel().copy(), gy.ravel().copy())


def level_weight(n: int, levels) -> float:
    """Share of level ``n`` in the multi-scale probability: 2^n / sum of 2^m."""
    levels = set(levels)
    if not levels:
        raise ValueError("empty level set")
    if n not in levels:
        raise ValueError(f"level {n} not in {sorted(levels)}")
    return 2.0 ** n / sum(2.0 ** m for m in levels)


def propagate_probability(current, inherited, n: int, levels):
    """Superpose this level's weighted posterior onto the inherited coarser sum."""
    return inherited + level_weight(n, levels) * current


def fuse_level(grid: PatchGrid, u, weights, keep, mask: SpatialMask, shape,
               left_valid=None, sigma2=None) -> LevelEstimate:
    """Pixel-wise weighted mean of covering patch disparities and probabilities.

    The weight of patch k at pixel x is ``weights[k] * mask(x - center_k)``.
    Pixels without a surviving covering patch are invalid.
    """
    h, w = shape
    u = np.asarray(u, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    keep = np.asarray(keep, dtype=bool) & (weights > 0)
    s2 = np.zeros_like(u) if sigma2 is None else np.asarray(sigma2, dtype=np.float64)
    sw, swu, swp, sws = _kernels.fuse_patches(h, w, grid.x0, grid.y0, grid.size, u, weights,
                                              s2, mask.weights, keep)
    valid = sw > 0
    if left_valid is not None:
        valid &= left_valid
    disp = np.zeros((h, w))
    prob = np.zeros((h, w))
    np.divide(swu, sw, out=disp, where=valid)
    np.divide(swp, sw, out=prob, where=valid)
    var = None
    if sigma2 is not None:
        var = np.zeros((h, w))
        np.divide(sws, sw * sw, out=var, where=valid)
    return LevelEstimate(grid.level, grid, u, weights, weights, keep,
                         DisparityField(disp, valid), prob, weight_sum=sw, disparity_var=var)


def upsample_nearest(values: np.ndarray, shape, factor: int = 2) -> np.ndarray:
    out = np.repeat(np.repeat(values, factor, axis=0), factor, axis=1)
    return out[:shape[0], :shape[1]]


def init_next_level(coarse: DisparityField, fine_shape) -> DisparityField:
    """Nearest-neighbour x2 upsample with disparities doubled; invalid -> 0."""
    vals = np.where(coarse.valid, 2.0 * coarse.values, 0.0)
    h, w = fine_shape
    if not (2 * coarse.shape[0] - 1 <= h <= 2 * coarse.shape[0]
            and 2 * coarse.shape[1] - 1 <= w <= 2 * coarse.shape[1]):
        raise ValueError(f"fine level {fine_shape} is not twice {coarse.shape}")
    return DisparityField(upsample_nearest(vals, fine_shape),
                          upsample_nearest(coarse.valid, fine_shape))


def _sample_centers(field: np.ndarray, grid: PatchGrid, scale: float = 1.0) -> np.ndarray:
    c = grid.centers * scale
    h, w = field.shape
    xi = np.clip(np.floor(c[:, 0]).astype(np.intp), 0, w - 1)
    yi = np.clip(np.floor(c[:, 1]).astype(np.intp), 0, h - 1)
    return field[yi, xi]


class Matcher:
    """Dense disparity estimator for rectified stereo pairs.

    Builds the spatial mask once and reuses it across frames. ``threads > 1``
    spreads the per-patch search of each level over numba worker threads;
    fusion stays sequential, so the output does not depend on the thread count.
    """

    def __init__(self, config: PipelineConfig | None = None):
        self.config = (config or PipelineConfig()).validate()
        cfg = self.config
        self.mask = (build_spatial_mask(cfg.patch_size, cfg.sigma_s) if cfg.use_spatial_mask
                     else uniform_mask(cfg.patch_size))
        self.offsets = np.asarray(cfg.window_offsets, dtype=np.float64)
        self.center_index = int(np.flatnonzero(self.offsets == 0)[0])
        self.levels = list(range(cfg.coarsest_exp, cfg.finest_exp - 1, -1))

    def _search(self, lvl, grid: PatchGrid, u_init: np.ndarray):
        cfg = self.config
        n = len(grid)
        out_u = np.empty(n)
        out_status = np.empty(n, dtype=np.int64)
        out_iter = np.empty(n, dtype=np.int64)
        out_res = np.empty(n)
        out_wres = np.empty((n, self.offsets.size))
        out_wok = np.empty((n, self.offsets.size), dtype=np.bool_)
        out_vfrac = np.empty(n)
        good, hopeless, improve = cfg.early_stop
        args = (lvl.left.data, lvl.left.valid, lvl.grad_x, lvl.right.data, lvl.right.valid,
                grid.x0, grid.y0, cfg.patch_size, u_init, cfg.max_iterations, cfg.update_eps,
                good_mse(good), hopeless, improve, cfg.valid_patch_ratio, 1e-8, self.offsets,
                out_u, out_status, out_iter, out_res, out_wres, out_wok, out_vfrac)
        if cfg.threads > 1:
            # skip the TBB probe, which warns on older TBB installs
            numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]
            numba.set_num_threads(min(cfg.threads, numba.config.NUMBA_NUM_THREADS))
            _kernels.level_search_parallel(*args)
        else:
            _kernels.level_search(*args)
        return out_u, out_status, out_res, out_wres, out_wok

    def match_level(self, lvl, init: DisparityField | None, coarse: LevelEstimate | None,
                    last: bool) -> LevelEstimate:
        cfg = self.config
        h, w = lvl.left.shape
        grid = make_patch_grid(w, h, cfg.patch_size, cfg.overlap, lvl.index)
        if init is None:
            u_init = np.zeros(len(grid))
        else:
            u_init = _sample_centers(init.values, grid)
        u, status, _, wres, wok = self._search(lvl, grid, u_init)
        post, _, priors, keep = batch_posteriors(wres, wok, self.center_index, cfg.patch_size)
        keep &= status == _kernels.CONVERGED
        post = np.where(keep, post, 0.0)

        if cfg.propagate_levels:
            if coarse is not None:
                inherited = _sample_centers(np.where(coarse.disparity.valid, coarse.probability, 0.0),
                                            grid, 0.5)
            else:
                inherited = np.zeros(len(grid))
            propagated = propagate_probability(post, inherited, lvl.index, self.levels)
        else:
            propagated = post

        sigma2 = None
        if last and cfg.estimate_variance:
            sig, _, _, _ = fit_window_variances(self.offsets, priors, wok & keep[:, None],
                                                sigma_fallback=cfg.sigma_fallback / 2 ** lvl.index)
            sigma2 = np.where(keep, sig * sig, 0.0)
        est = fuse_level(grid, u, np.where(keep, propagated, 0.0), keep, self.mask, (h, w),
                         lvl.left.valid, sigma2)
        est.posterior = post
        est.propagated = propagated
        est.status = status
        est.window_priors = priors
        return est

    def match(self, left: GrayImage, right: GrayImage, cam: CameraParams | None = None) -> MatchResult:
        cfg = self.config
        t0 = time.perf_counter()
        if cfg.parallax_sign < 0:
            left = GrayImage(left.data[:, ::-1], left.valid[:, ::-1])
            right = GrayImage(right.data[:, ::-1], right.valid[:, ::-1])
        pyr = build_pyramid(left, right, cfg.coarsest_exp, cfg.finest_exp, cfg.patch_size)
        t1 = time.perf_counter()
        estimates = []
        init = None
        coarse = None
        for lvl in pyr.levels:
            if init is not None:
                init = init_next_level(coarse.disparity, lvl.left.shape)
            est = self.match_level(lvl, init, coarse, lvl.index == cfg.finest_exp)
            estimates.append(est)
            coarse = est
            init = est.disparity
        t2 = time.perf_counter()

        final = estimates[-1]
        patch_px = cfg.patch_size ** 2
        filtered = filter_validity(final.disparity, final.probability, cfg.gamma,
                                   cfg.pixel_threshold, patch_px)
        scale = 2 ** cfg.finest_exp
        shape = left.shape
        disp = upsample_nearest(filtered.values * scale, shape, scale)
        valid = upsample_nearest(filtered.valid, shape, scale)
        prob = upsample_nearest(np.where(filtered.valid, final.probability, 0.0), shape, scale)
        sigma_disp = None
        if final.disparity_var is not None:
            sigma_disp = upsample_nearest(np.sqrt(final.disparity_var) * scale, shape, scale)
        if cfg.parallax_sign < 0:
            disp, valid, prob = disp[:, ::-1], valid[:, ::-1], prob[:, ::-1]
            if sigma_disp is not None:
                sigma_disp = sigma_disp[:, ::-1]
        field_ = DisparityField(np.ascontiguousarray(disp), np.ascontiguousarray(valid))
        result = MatchResult(field_, np.ascontiguousarray(prob), estimates,
                             sigma_disparity=sigma_disp)
        if cam is not None:
            depth = disparity_to_depth(field_, cam, cfg.min_disparity)
            sigma = None
            if sigma_disp is not None:
                sigma = np.where(depth.valid,
                                 depth_sigma_field(field_, sigma_disp ** 2, cam), np.nan)
            result.depth = DepthResult(depth.depth, depth.valid, sigma)
        t3 = time.perf_counter()
        result.timings = {"pyramid": t1 - t0, "levels": t2 - t1, "output": t3 - t2,
                          "total": t3 - t0}
        return result


def match_pair(left: GrayImage, right: GrayImage, config: PipelineConfig | None = None,
               cam: CameraParams | None = None) -> MatchResult:
    return Matcher(config).match(left, right, cam)
