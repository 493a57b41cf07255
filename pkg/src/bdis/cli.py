"""``bdis`` command line: ``match`` a stereo pair, ``bench`` synthetic scenes, ``render`` a test pair.

Exit codes are fixed per failure class so scripts can branch on them.
"""
from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .c2f import Matcher
from .config import ConfigError, PipelineConfig, config_from_mapping, load_config
from .stereoio import (CalibrationError, StereoIOError, load_calibration, load_stereo_pair,
                       metrics_line, read_pfm, write_metrics_csv, write_pfm)
from .synthbench import (BenchmarkFrame, FrameMetrics, SyntheticScene, compute_metrics,
                         load_scene, render_scene, run_benchmark, time_matching)
from .depthvar import CameraParams

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DEGENERATE = 4

_HELP = {
    "coarsest_exp": "coarsest pyramid level n (scale 2^-n)",
    "finest_exp": "finest pyramid level n; output is upsampled from here",
    "patch_size": "patch side length in pixels",
    "overlap": "patch overlap ratio",
    "max_iterations": "LK iteration cap per patch",
    "early_stop": "good-fit ratio, hopeless ratio, min. relative improvement",
    "window_offsets": "disparity offsets of the posterior window (symmetric, with 0)",
    "sigma_s": "spatial weighting deviation in pixels",
    "pixel_threshold": "minimum fused probability of an output pixel",
    "gamma": "islands smaller than gamma*patch_size^2 pixels are dropped",
    "valid_patch_ratio": "minimum valid-pixel ratio of a patch",
    "estimate_variance": "fit per-patch variances and write sigma.pfm",
    "threads": "worker threads for the per-patch search",
    "seed": "seed for synthetic scenes without their own",
    "update_eps": "LK stops when the update is below this (px)",
    "sigma_fallback": "deviation given to patches whose variance fit is rejected (px)",
    "min_disparity": "smaller disparities are invalid in the depth map (px)",
    "use_spatial_mask": "weight patch pixels by the spatial Gaussian",
    "propagate_levels": "carry probability mass down from coarser levels",
    "parallax_sign": "+1 if scene points shift right in the right image, -1 otherwise",
}


class _Formatter(argparse.ArgumentDefaultsHelpFormatter, argparse.RawDescriptionHelpFormatter):
    pass


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("pipeline parameters (override --config)")
    g.add_argument("--config", metavar="FILE", help="key = value parameter file")
    for f in dataclasses.fields(PipelineConfig):
        flag = "--" + f.name.replace("_", "-")
        kw = dict(dest=f.name, default=argparse.SUPPRESS,
                  help=f"{_HELP[f.name]} (default: {_show(f.default)})")
        if isinstance(f.default, bool):
            g.add_argument(flag, action=argparse.BooleanOptionalAction, **kw)
        elif isinstance(f.default, tuple):
            n = len(f.default) if f.name == "early_stop" else "+"
            g.add_argument(flag, type=float, nargs=n, metavar="X", **kw)
        else:
            g.add_argument(flag, type=type(f.default), metavar="N", **kw)


def _show(v) -> str:
    if isinstance(v, tuple):
        return " ".join(f"{x:g}" for x in v)
    return str(v)


def _config(args) -> PipelineConfig:
    base = load_config(args.config) if args.config else PipelineConfig()
    names = {f.name for f in dataclasses.fields(PipelineConfig)}
    overrides = {k: v for k, v in vars(args).items() if k in names}
    return config_from_mapping(overrides, base)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bdis", description=__doc__, formatter_class=_Formatter)
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    m = sub.add_parser("match", help="estimate disparity and depth for one rectified pair",
                       formatter_class=_Formatter)
    m.add_argument("left", help="left image (PNG or PGM)")
    m.add_argument("right", help="right image (PNG or PGM)")
    m.add_argument("--calib", required=True, metavar="FILE",
                   help="calibration file with focal_px, baseline_mm, width, height")
    m.add_argument("--out-dir", default=".", metavar="DIR", help="where the PFM maps go")
    m.add_argument("--reference", metavar="PFM",
                   help="reference disparity; adds depth errors to the metrics line")
    m.add_argument("--name", default="frame", help="frame label in the metrics line")
    _add_config_flags(m)

    b = sub.add_parser("bench", help="render, match and score synthetic scenes",
                       formatter_class=_Formatter)
    b.add_argument("scenes", nargs="*", metavar="SCENE",
                   help="scene files or directories of *.scene files; none runs the built-in suite")
    b.add_argument("--reps", type=int, default=10, help="timed repetitions per frame")
    b.add_argument("--out-csv", default="metrics.csv", metavar="FILE", help="metrics table")
    b.add_argument("--figures", metavar="DIR", help="also render PNG figures into DIR")
    b.add_argument("--no-warmup", action="store_true",
                   help="do not run one untimed match before timing (includes JIT time)")
    _add_config_flags(b)

    r = sub.add_parser("render", help="write a synthetic pair, calibration and reference",
                       formatter_class=_Formatter)
    r.add_argument("scene", nargs="?", help="scene file; default is a textured plane")
    r.add_argument("--out-dir", default=".", metavar="DIR")
    r.add_argument("--seed", type=int, default=None, help="seed when the scene has none")
    return ap


def _fail(code: int, kind: str, msg) -> int:
    text = " ".join(str(msg).split())
    print(f"bdis: {kind} error: {text}", file=sys.stderr)
    return code


def _cmd_match(args) -> int:
    cfg = _config(args)
    calib = load_calibration(args.calib)
    left, right = load_stereo_pair(args.left, args.right)
    if (left.width, left.height) != (calib.width, calib.height):
        raise CalibrationError(f"calibration says {calib.width}x{calib.height} but images are "
                               f"{left.width}x{left.height}")
    reference = read_pfm(args.reference) if args.reference else None
    cam = calib.camera
    try:
        result, secs = time_matching(Matcher(cfg), left, right, cam, 1)
    except ValueError as exc:
        raise _Degenerate(exc) from exc
    if not result.disparity.valid.any():
        raise _Degenerate("no pixel could be matched (textureless or fully invalid input)")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    disp = result.disparity
    write_pfm(disp.values, out / "disparity.pfm", disp.valid)
    write_pfm(result.depth.depth, out / "depth.pfm", result.depth.valid)
    if result.depth.sigma is not None:
        write_pfm(np.nan_to_num(result.depth.sigma, nan=-1.0), out / "sigma.pfm",
                  result.depth.valid)
    if reference is not None:
        if reference.shape != disp.shape:
            raise StereoIOError(f"reference is {reference.shape[1]}x{reference.shape[0]}, "
                                f"images are {left.width}x{left.height}")
        ref_ok = reference > 0
        ref_depth = np.full(reference.shape, np.nan)
        ref_depth[ref_ok] = cam.fb / reference[ref_ok]
        metrics = compute_metrics(result.depth, ref_depth, secs, args.name)
    else:
        metrics = FrameMetrics(args.name, float("nan"), float("nan"),
                               int(result.depth.valid.sum()), 1000.0 * secs, None, False)
    print(metrics_line(metrics))
    return EXIT_OK


def _scene_files(paths) -> list[Path]:
    files = []
    for raw in paths:
        p = Path(raw)
        if p.is_dir():
            found = sorted(p.glob("*.scene"))
            if not found:
                raise StereoIOError(f"no *.scene files in {p}")
            files.extend(found)
        else:
            files.append(p)
    return files


def builtin_suite(seed: int = 0) -> list[BenchmarkFrame]:
    cam = CameraParams(500.0, 5.0)
    frames = [BenchmarkFrame(f"plane_d{d}", SyntheticScene(disparity=float(d), seed=seed), cam)
              for d in (4, 8, 16)]
    for shading in ("diffuse", "nonlambertian"):
        frames.append(BenchmarkFrame(f"sphere_{shading}",
                                     SyntheticScene(surface="sphere_patch", shading=shading,
                                                    seed=seed), cam))
    return frames


def _cmd_bench(args) -> int:
    cfg = _config(args)
    if args.reps < 1:
        raise ConfigError(f"--reps must be >= 1, got {args.reps}")
    if args.scenes:
        frames = [load_scene(p, cfg.seed) for p in _scene_files(args.scenes)]
    else:
        frames = builtin_suite(cfg.seed)
    result = run_benchmark(frames, cfg, args.reps, warmup=not args.no_warmup)
    write_metrics_csv(result.all_rows, args.out_csv)
    for row in result.all_rows:
        print(metrics_line(row))
    if args.figures:
        from .report import write_report
        write_report(result, args.figures)
    for name, why in result.failures.items():
        print(f"bdis: frame {name} failed: {why}", file=sys.stderr)
    return EXIT_DEGENERATE if result.failures else EXIT_OK


def _cmd_render(args) -> int:
    from PIL import Image

    frame = (load_scene(args.scene, args.seed or 0) if args.scene
             else BenchmarkFrame("plane", SyntheticScene(seed=args.seed or 0), CameraParams(500, 5)))
    pair = render_scene(frame.scene, frame.cam, frame.size)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for side, img in (("left", pair.left), ("right", pair.right)):
        Image.fromarray(np.round(img.data * 255).astype(np.uint8)).save(out / f"{side}.png")
    w, h = frame.size
    (out / "calib.txt").write_text(
        f"focal_px = {frame.cam.focal_px:g}\nbaseline_mm = {frame.cam.baseline:g}\n"
        f"width = {w}\nheight = {h}\n", encoding="utf-8")
    write_pfm(pair.disparity, out / "reference.pfm")
    return EXIT_OK


class _Degenerate(Exception):
    pass


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handler = {"match": _cmd_match, "bench": _cmd_bench, "render": _cmd_render}[args.command]
    try:
        return handler(args)
    except CalibrationError as exc:
        return _fail(EXIT_CONFIG, "calibration", exc)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", exc)
    except (StereoIOError, OSError) as exc:
        return _fail(EXIT_IO, "I/O", exc)
    except _Degenerate as exc:
        return _fail(EXIT_DEGENERATE, "degenerate input", exc)


if __name__ == "__main__":
    sys.exit(main())
