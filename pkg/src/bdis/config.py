"""Pipeline parameters and the ``key = value`` text format shared by all config files."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    coarsest_exp: int = 5
    finest_exp: int = 1
    patch_size: int = 10
    overlap: float = 0.55
    max_iterations: int = 12
    early_stop: tuple[float, float, float] = (0.05, 0.95, 0.10)
    window_offsets: tuple[float, ...] = (-1.0, -0.5, 0.0, 0.5, 1.0)
    sigma_s: float = 4.0
    pixel_threshold: float = 0.15
    gamma: float = 0.75
    valid_patch_ratio: float = 0.75
    estimate_variance: bool = False
    threads: int = 1
    seed: int = 0
    # not among the published parameters
    update_eps: float = 1e-2
    sigma_fallback: float = 2.0
    min_disparity: float = 0.1
    use_spatial_mask: bool = True
    propagate_levels: bool = True
    parallax_sign: int = 1

    def validate(self) -> "PipelineConfig":
        if not 0 <= self.finest_exp <= self.coarsest_exp:
            raise ConfigError("need 0 <= finest_exp <= coarsest_exp")
        if self.patch_size < 2:
            raise ConfigError("patch_size must be >= 2")
        if not 0.0 <= self.overlap < 1.0:
            raise ConfigError("overlap must lie in [0, 1)")
        if self.max_iterations < 1:
            raise ConfigError("max_iterations must be >= 1")
        if len(self.early_stop) != 3:
            raise ConfigError("early_stop takes three values")
        offs = tuple(float(o) for o in self.window_offsets)
        if 0.0 not in offs or sorted(offs) != [-o for o in sorted(offs, reverse=True)]:
            raise ConfigError("window_offsets must be symmetric about 0 and include 0")
        if self.sigma_s <= 0:
            raise ConfigError("sigma_s must be positive")
        if not 0.0 <= self.pixel_threshold <= 1.0:
            raise ConfigError("pixel_threshold must lie in [0, 1]")
        if self.gamma < 0:
            raise ConfigError("gamma must be non-negative")
        if not 0.0 < self.valid_patch_ratio <= 1.0:
            raise ConfigError("valid_patch_ratio must lie in (0, 1]")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if self.parallax_sign not in (1, -1):
            raise ConfigError("parallax_sign must be +1 or -1")
        return self


def parse_kv_text(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment, blank lines are skipped."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out[key.replace("-", "_")] = value
    return out


def _coerce(name: str, default, raw):
    if isinstance(raw, str):
        raw = raw.strip()
    try:
        if isinstance(default, bool):
            if isinstance(raw, bool):
                return raw
            low = str(raw).lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = raw.replace(",", " ").split() if isinstance(raw, str) else raw
            return tuple(float(v) for v in items)
    except (TypeError, ValueError):
        raise ConfigError(f"bad value for {name}: {raw!r}") from None
    return raw


def config_from_mapping(values: dict, base: PipelineConfig | None = None) -> PipelineConfig:
    cfg = dataclasses.replace(base) if base is not None else PipelineConfig()
    known = {f.name: f for f in dataclasses.fields(PipelineConfig)}
    for key, raw in values.items():
        name = key.replace("-", "_")
        if name not in known:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(cfg, name, _coerce(name, getattr(cfg, name), raw))
    return cfg.validate()


def load_config(path) -> PipelineConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_mapping(parse_kv_text(text))


PUBLISHED_DEFAULTS = {
    f.name: f.default for f in dataclasses.fields(PipelineConfig)
    if f.name in ("coarsest_exp", "finest_exp", "patch_size", "overlap", "max_iterations",
                  "early_stop", "window_offsets", "sigma_s", "pixel_threshold", "gamma",
                  "valid_patch_ratio", "estimate_variance", "threads")
}
