"""Analytic synthetic stereo scenes with exact reference disparity, plus metrics.

Camera model: both views share focal length ``f`` and principal point at the
image centre; a surface point at depth ``Z`` seen at left pixel ``x``
appears in the right view at ``x + f*b/Z``. The surface is painted by
projecting a seeded texture raster from the left camera, so
``right(x, y) = shade_r(x, y) * texture(x - d_r(x, y), y)`` where ``d_r`` is
the disparity of the surface point seen at right pixel ``(x, y)``.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .c2f import Matcher
from .config import ConfigError, PipelineConfig, parse_kv_text
from .depthvar import CameraParams, DepthResult, DisparityField
from .imagepyr import GrayImage

SURFACES = ("plane", "slanted_plane", "sphere_patch")
TEXTURES = ("perlin", "checker", "constant")
SHADINGS = ("diffuse", "nonlambertian")


@dataclass
class SyntheticScene:
    surface: str = "plane"
    disparity: float = 8.0          # plane
    d0: float = 8.0                 # slanted_plane, at the image centre
    gradient: tuple[float, float] = (0.005, 0.0)
    center_depth: float = 150.0     # sphere_patch apex depth
    radius: float = 300.0
    texture: str = "perlin"
    texture_scale: float = 24.0
    octaves: int = 5
    checker_size: int = 8
    shading: str = "diffuse"
    albedo: float = 0.8
    ambient: float = 0.2
    highlight_center: tuple[float, float] | None = None
    highlight_falloff: float = 40.0
    highlight_gain: float = 0.35
    noise_std: float = 0.0
    seed: int = 0
    name: str = ""

    def validate(self):
        if self.surface not in SURFACES:
            raise ValueError(f"unknown surface {self.surface!r}")
        if self.texture not in TEXTURES:
            raise ValueError(f"unknown texture {self.texture!r}")
        if self.shading not in SHADINGS:
            raise ValueError(f"unknown shading {self.shading!r}")
        return self


@dataclass
class RenderedPair:
    left: GrayImage
    right: GrayImage
    disparity: np.ndarray
    depth: np.ndarray
    right_disparity: np.ndarray


@dataclass
class FrameMetrics:
    frame: str
    mean_err: float
    median_err: float
    valid_px: int
    runtime_ms: float
    coverage_rate: float | None = None
    errors_defined: bool = True


def make_texture(width: int, height: int, scene: SyntheticScene) -> np.ndarray:
    """Seeded texture raster in [0, 1]."""
    if scene.texture == "constant":
        return np.full((height, width), 0.5)
    if scene.texture == "checker":
        yy, xx = np.mgrid[0:height, 0:width]
        return np.where(((xx // scene.checker_size) + (yy // scene.checker_size)) % 2 == 0,
                        0.8, 0.2).astype(np.float64)
    rng = np.random.default_rng(scene.seed)
    out = np.zeros((height, width))
    amp, total = 1.0, 0.0
    cell = scene.texture_scale
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    for _ in range(scene.octaves):
        gh, gw = int(height / cell) + 3, int(width / cell) + 3
        lattice = rng.random((gh, gw))
        fx, fy = xx / cell, yy / cell
        ix, iy = np.floor(fx).astype(int), np.floor(fy).astype(int)
        tx, ty = fx - ix, fy - iy
        sx = tx * tx * (3 - 2 * tx)
        sy = ty * ty * (3 - 2 * ty)
        top = lattice[iy, ix] * (1 - sx) + lattice[iy, ix + 1] * sx
        bot = lattice[iy + 1, ix] * (1 - sx) + lattice[iy + 1, ix + 1] * sx
        out += amp * (top * (1 - sy) + bot * sy)
        total += amp
        amp *= 0.6
        cell = max(cell / 2.0, 1.5)
    out /= total
    lo, hi = out.min(), out.max()
    return 0.1 + 0.8 * (out - lo) / max(hi - lo, 1e-12)


def _sample_row_linear(tex: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Linear interpolation of each texture row at fractional columns ``xs``."""
    h, w = tex.shape
    x0 = np.clip(np.floor(xs).astype(np.intp), 0, w - 2)
    a = xs - x0
    rows = np.arange(h)[:, None]
    return (1 - a) * tex[rows, x0] + a * tex[rows, x0 + 1]


class _Geometry:
    """Depth along pixel rays for each supported surface (left camera frame)."""

    def __init__(self, scene: SyntheticScene, cam: CameraParams, width: int, height: int):
        self.scene, self.cam = scene, cam
        self.cx, self.cy = (width - 1) / 2.0, (height - 1) / 2.0

    def depth_on_rays(self, xs, ys, cam_x: float) -> np.ndarray:
        """Depth of the first surface hit along rays of the camera at ``(cam_x, 0, 0)``."""
        s, f = self.scene, self.cam.focal_px
        a = (xs - self.cx) / f
        b = (ys - self.cy) / f
        if s.surface == "plane":
            return np.full(np.broadcast(a, b).shape, self.cam.fb / s.disparity)
        if s.surface == "slanted_plane":
            # 1/Z affine in left image coords: d = d0 + gx*(x-cx) + gy*(y-cy)
            gx, gy = s.gradient
            # point (cam_x + a Z, b Z, Z) projects to left x = cx + f (cam_x + aZ)/Z
            # d(Z) = d0 + gx f (cam_x/Z + a) + gy f b, and d = fb/Z
            k = s.d0 + gx * f * a + gy * f * b
            denom = self.cam.fb - gx * f * cam_x
            return denom / k
        zc = s.center_depth + s.radius
        # ray p = (cam_x, 0, 0) + t (a, b, 1); |p - (0, 0, zc)|^2 = R^2
        vv = a * a + b * b + 1.0
        vc = a * (-cam_x) + zc      # v . (C - o)
        oc2 = cam_x * cam_x + zc * zc
        disc = vc * vc - vv * (oc2 - s.radius ** 2)
        if np.any(disc < 0):
            raise ValueError("sphere_patch does not cover the whole image; enlarge the radius")
        return (vc - np.sqrt(disc)) / vv

    def normals(self, xs, ys, cam_x: float):
        """Unit surface normals (pointing at the cameras) and hit points."""
        s, f = self.scene, self.cam.focal_px
        z = self.depth_on_rays(xs, ys, cam_x)
        a = (xs - self.cx) / f
        b = (ys - self.cy) / f
        p = np.stack([cam_x + a * z, b * z, z], axis=-1)
        if s.surface == "plane":
            n = np.broadcast_to(np.array([0.0, 0.0, -1.0]), p.shape).copy()
        elif s.surface == "slanted_plane":
            gx, gy = s.gradient
            # plane: d0 + gx f (X/Z) + gy f (Y/Z) = fb/Z  ->  gx f X + gy f Y + d0 Z - fb = 0
            n = np.broadcast_to(np.array([gx * f, gy * f, s.d0]), p.shape).copy()
            n = -n
        else:
            n = p - np.array([0.0, 0.0, s.center_depth + s.radius])
        n /= np.linalg.norm(n, axis=-1, keepdims=True)
        return n, p


def _shade(scene: SyntheticScene, geom: _Geometry, xs, ys, cam_x: float) -> np.ndarray:
    if scene.shading == "diffuse":
        return np.full(np.broadcast(xs, ys).shape, scene.albedo)
    n, p = geom.normals(xs, ys, cam_x)
    to_cam = np.array([cam_x, 0.0, 0.0]) - p
    to_cam /= np.linalg.norm(to_cam, axis=-1, keepdims=True)
    cos_a = np.abs(np.sum(n * to_cam, axis=-1))
    hx, hy = scene.highlight_center if scene.highlight_center is not None else (geom.cx, geom.cy)
    lobe = np.exp(-((xs - hx) ** 2 + (ys - hy) ** 2) / (2.0 * scene.highlight_falloff ** 2))
    return scene.albedo * np.maximum(cos_a, scene.ambient) + scene.highlight_gain * lobe


def render_scene(scene: SyntheticScene, cam: CameraParams, size=(640, 480)) -> RenderedPair:
    """Render a rectified pair and the left-view reference disparity/depth."""
    scene.validate()
    width, height = size
    geom = _Geometry(scene, cam, width, height)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)

    # right camera sits at X = -b so that x_right = x_left + f b / Z
    z_left = geom.depth_on_rays(xx, yy, 0.0)
    z_right = geom.depth_on_rays(xx, yy, -cam.baseline)
    if np.any(~np.isfinite(z_left)) or np.any(z_left <= 0) or np.any(z_right <= 0):
        raise ValueError("surface must lie in front of both cameras")
    d_left = cam.fb / z_left
    d_right = cam.fb / z_right
    if d_left.max() >= width or d_right.max() >= width:
        raise ValueError("disparity exceeds the image width")

    margin = int(math.ceil(d_right.max())) + 2
    tex = make_texture(width + margin, height, scene)
    # texture column c corresponds to left-image column c - margin
    left_tex = tex[:, margin:]
    right_tex = _sample_row_linear(tex, xx - d_right + margin)

    left = left_tex * _shade(scene, geom, xx, yy, 0.0)
    right = right_tex * _shade(scene, geom, xx, yy, -cam.baseline)
    if scene.noise_std > 0:
        rng = np.random.default_rng(scene.seed + 7919)
        left = left + rng.normal(0.0, scene.noise_std, left.shape)
        right = right + rng.normal(0.0, scene.noise_std, right.shape)
    left = np.clip(left, 0.0, 1.0)
    right = np.clip(right, 0.0, 1.0)
    return RenderedPair(GrayImage(left), GrayImage(right), d_left, z_left, d_right)


def compute_metrics(estimate: DepthResult, reference_depth: np.ndarray, runtime_s: float,
                    frame: str = "0") -> FrameMetrics:
    if estimate.depth.shape != reference_depth.shape:
        raise ValueError("estimate and reference differ in size")
    valid = estimate.valid & np.isfinite(reference_depth)
    n = int(valid.sum())
    runtime_ms = 1000.0 * runtime_s
    if n == 0:
        return FrameMetrics(frame, float("nan"), float("nan"), 0, runtime_ms, None, False)
    err = np.abs(estimate.depth[valid] - reference_depth[valid])
    coverage = None
    if estimate.sigma is not None:
        sig = estimate.sigma[valid]
        coverage = float(np.mean(err <= 1.96 * sig))
    return FrameMetrics(frame, float(err.mean()), float(np.median(err)), n, runtime_ms, coverage)


def disparity_errors(estimate: DisparityField, reference: np.ndarray) -> np.ndarray:
    return np.abs(estimate.values[estimate.valid] - reference[estimate.valid])


@dataclass
class BenchmarkFrame:
    name: str
    scene: SyntheticScene
    cam: CameraParams
    size: tuple[int, int] = (640, 480)


@dataclass
class BenchmarkResult:
    rows: list[FrameMetrics]
    aggregate: FrameMetrics
    outputs: dict = field(default_factory=dict)
    failures: dict = field(default_factory=dict)

    @property
    def all_rows(self) -> list[FrameMetrics]:
        return self.rows + [self.aggregate]


def _aggregate(rows: list[FrameMetrics]) -> FrameMetrics:
    ok = [r for r in rows if r.errors_defined]
    if not ok:
        return FrameMetrics("average", float("nan"), float("nan"), 0, float("nan"), None, False)
    cov = [r.coverage_rate for r in ok if r.coverage_rate is not None]
    return FrameMetrics("average",
                        float(np.mean([r.mean_err for r in ok])),
                        float(np.mean([r.median_err for r in ok])),
                        int(round(np.mean([r.valid_px for r in ok]))),
                        float(np.mean([r.runtime_ms for r in ok])),
                        float(np.mean(cov)) if cov else None)


def time_matching(matcher: Matcher, left: GrayImage, right: GrayImage, cam: CameraParams,
                  repetitions: int):
    """Run the matcher ``repetitions`` times; return the last result and mean seconds."""
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    times = []
    result = None
    for _ in range(repetitions):
        t0 = time.perf_counter()
        result = matcher.match(left, right, cam)
        times.append(time.perf_counter() - t0)
    return result, float(np.mean(times))


def run_benchmark(frames: list[BenchmarkFrame], config: PipelineConfig | None = None,
                  repetitions: int = 10, warmup: bool = True) -> BenchmarkResult:
    """Render, match and score each frame; a failing frame is recorded and skipped."""
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    matcher = Matcher(config)
    rows, outputs, failures = [], {}, {}
    for fr in frames:
        try:
            pair = render_scene(fr.scene, fr.cam, fr.size)
            if warmup:
                matcher.match(pair.left, pair.right, fr.cam)
            result, mean_s = time_matching(matcher, pair.left, pair.right, fr.cam, repetitions)
            rows.append(compute_metrics(result.depth, pair.depth, mean_s, fr.name))
            outputs[fr.name] = (pair, result)
        except Exception as exc:  # noqa: BLE001 - a bad frame must not stop the run
            failures[fr.name] = f"{type(exc).__name__}: {exc}"
    return BenchmarkResult(rows, _aggregate(rows), outputs, failures)


_SCENE_FLOATS = {"disparity", "d0", "center_depth", "radius", "texture_scale", "albedo",
                 "ambient", "highlight_falloff", "highlight_gain", "noise_std"}
_SCENE_INTS = {"octaves", "checker_size", "seed"}


def scene_from_text(text: str, name: str = "", default_seed: int = 0):
    """Parse a scene file: scene keys plus ``focal_px``, ``baseline_mm``, ``width``, ``height``.

    ``default_seed`` applies when the file has no ``seed`` line.
    """
    kv = parse_kv_text(text)
    scene = SyntheticScene(name=name, seed=default_seed)
    cam_f, cam_b = kv.pop("focal_px", "500"), kv.pop("baseline_mm", "5")
    width, height = kv.pop("width", "640"), kv.pop("height", "480")
    try:
        for key, raw in kv.items():
            if key in _SCENE_FLOATS:
                setattr(scene, key, float(raw))
            elif key in _SCENE_INTS:
                setattr(scene, key, int(raw))
            elif key in ("surface", "texture", "shading"):
                setattr(scene, key, raw)
            elif key in ("gradient", "highlight_center"):
                vals = tuple(float(v) for v in raw.replace(",", " ").split())
                if len(vals) != 2:
                    raise ValueError(f"{key} takes two values")
                setattr(scene, key, vals)
            else:
                raise ConfigError(f"unknown scene key {key!r}")
        cam = CameraParams(float(cam_f), float(cam_b))
        size = (int(width), int(height))
        scene.validate()
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"scene {name or '<text>'}: {exc}") from None
    return BenchmarkFrame(name, scene, cam, size)


def load_scene(path, default_seed: int = 0) -> BenchmarkFrame:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read scene {p}: {exc}") from exc
    return scene_from_text(text, p.stem, default_seed)
