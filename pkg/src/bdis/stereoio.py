"""File formats: PNG/PGM stereo input, calibration text, PFM maps and the metrics CSV."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .config import ConfigError, parse_kv_text
from .depthvar import CameraParams
from .imagepyr import GrayImage, to_grayscale

PFM_SENTINEL = -1.0
CSV_HEADER = ("frame", "mean_err", "median_err", "valid_px", "runtime_ms", "coverage_rate")
CALIBRATION_KEYS = ("focal_px", "baseline_mm", "width", "height")


class StereoIOError(Exception):
    pass


class MissingFileError(StereoIOError):
    pass


class DecodeError(StereoIOError):
    pass


class DimensionMismatchError(StereoIOError):
    pass


class CalibrationError(ConfigError):
    pass


@dataclass(frozen=True)
class CalibrationFile:
    focal_px: float
    baseline_mm: float
    width: int
    height: int

    @property
    def camera(self) -> CameraParams:
        return CameraParams(self.focal_px, self.baseline_mm)


def load_image(path) -> GrayImage:
    p = Path(path)
    if not p.is_file():
        raise MissingFileError(f"image not found: {p}")
    try:
        with Image.open(p) as img:
            img.load()
            if img.mode in ("L", "RGB", "RGBA"):
                arr = np.asarray(img)
            elif img.mode in ("P", "LA"):
                arr = np.asarray(img.convert("RGBA"))
            else:
                raise DecodeError(f"{p}: unsupported pixel mode {img.mode} (need 8-bit gray or RGB)")
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise DecodeError(f"cannot decode {p}: {exc}") from exc
    try:
        return to_grayscale(arr)
    except ValueError as exc:
        raise DecodeError(f"{p}: {exc}") from exc


def load_stereo_pair(left_path, right_path) -> tuple[GrayImage, GrayImage]:
    left = load_image(left_path)
    right = load_image(right_path)
    if left.shape != right.shape:
        raise DimensionMismatchError(
            f"left is {left.width}x{left.height} but right is {right.width}x{right.height}")
    return left, right


def parse_calibration(text: str) -> CalibrationFile:
    kv = parse_kv_text(text)
    missing = [k for k in CALIBRATION_KEYS if k not in kv]
    if missing:
        raise CalibrationError(f"calibration is missing key(s): {', '.join(missing)}")
    vals = {}
    for key in CALIBRATION_KEYS:
        try:
            v = float(kv[key])
        except ValueError:
            raise CalibrationError(f"calibration {key}: cannot parse {kv[key]!r}") from None
        if not (math.isfinite(v) and v > 0):
            raise CalibrationError(f"calibration {key} must be positive, got {kv[key]}")
        if key in ("width", "height"):
            if v != int(v):
                raise CalibrationError(f"calibration {key} must be an integer, got {kv[key]}")
            v = int(v)
        vals[key] = v
    return CalibrationFile(**vals)


def load_calibration(path) -> CalibrationFile:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise CalibrationError(f"cannot read calibration {p}: {exc}") from exc
    return parse_calibration(text)


def pfm_bytes(field: np.ndarray, valid: np.ndarray | None = None) -> bytes:
    data = np.asarray(field, dtype=np.float32)
    if data.ndim != 2:
        raise ValueError("PFM fields are 2-D")
    if valid is not None:
        data = np.where(valid, data, np.float32(PFM_SENTINEL))
    h, w = data.shape
    header = f"Pf\n{w} {h}\n-1.0\n".encode("ascii")
    return header + np.ascontiguousarray(data[::-1]).astype("<f4").tobytes()


def write_pfm(field: np.ndarray, path, valid: np.ndarray | None = None) -> None:
    """Write a single-channel little-endian PFM; pixels outside ``valid`` become -1."""
    Path(path).write_bytes(pfm_bytes(field, valid))


def read_pfm(path) -> np.ndarray:
    p = Path(path)
    try:
        raw = p.read_bytes()
    except FileNotFoundError:
        raise MissingFileError(f"PFM not found: {p}") from None
    lines = raw.split(b"\n", 3)
    if len(lines) < 4 or lines[0].strip() != b"Pf":
        raise DecodeError(f"{p}: not a single-channel PFM")
    try:
        w, h = (int(v) for v in lines[1].split())
        scale = float(lines[2])
    except ValueError:
        raise DecodeError(f"{p}: bad PFM header") from None
    dtype = "<f4" if scale < 0 else ">f4"
    body = lines[3]
    if len(body) != w * h * 4:
        raise DecodeError(f"{p}: expected {w * h * 4} data bytes, found {len(body)}")
    return np.frombuffer(body, dtype=dtype).reshape(h, w)[::-1].astype(np.float32)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_metrics_csv(rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(CSV_HEADER)
        for r in rows:
            out.writerow([r.frame] + [_fmt(getattr(r, k)) for k in CSV_HEADER[1:]])


def read_metrics_csv(path) -> list[dict]:
    """Parse a metrics CSV; empty cells come back as ``None``."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_HEADER:
            raise DecodeError(f"{path}: unexpected header {reader.fieldnames}")
        rows = []
        for rec in reader:
            row = {"frame": rec["frame"]}
            for k in CSV_HEADER[1:]:
                cell = rec[k]
                row[k] = None if cell == "" else (int(cell) if k == "valid_px" else float(cell))
            rows.append(row)
    return rows


def metrics_line(m) -> str:
    return ",".join([m.frame] + [_fmt(getattr(m, k)) for k in CSV_HEADER[1:]])
