"""Benchmark figures: per-frame disparity/error panels and a summary bar chart."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "legend.fontsize": 8,
    "figure.dpi": 110,
    "savefig.bbox": "tight",
}


def _masked(values, valid):
    return np.ma.masked_where(~np.asarray(valid, dtype=bool), values)


def frame_figure(name: str, pair, result, path) -> Path:
    """Reference disparity, estimate and absolute error side by side."""
    path = Path(path)
    est = result.disparity
    err = np.abs(est.values - pair.disparity)
    lo, hi = np.nanmin(pair.disparity), np.nanmax(pair.disparity)
    if hi - lo < 1e-6:
        lo, hi = lo - 0.5, hi + 0.5
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 4, figsize=(13, 2.8))
        axes[0].imshow(pair.left.data, cmap="gray", vmin=0, vmax=1)
        axes[0].set_title("left image")
        im = axes[1].imshow(pair.disparity, cmap="viridis", vmin=lo, vmax=hi)
        axes[1].set_title("reference disparity [px]")
        fig.colorbar(im, ax=axes[1], fraction=0.046)
        im = axes[2].imshow(_masked(est.values, est.valid), cmap="viridis", vmin=lo, vmax=hi)
        axes[2].set_title(f"estimate ({est.valid.mean():.1%} valid)")
        fig.colorbar(im, ax=axes[2], fraction=0.046)
        e = err[est.valid]
        top = float(np.percentile(e, 99)) if e.size else 1.0
        im = axes[3].imshow(_masked(err, est.valid), cmap="magma", vmin=0, vmax=max(top, 1e-3))
        axes[3].set_title("|error| [px]")
        fig.colorbar(im, ax=axes[3], fraction=0.046)
        for ax in axes:
            ax.set_xticks([])
            ax.set_yticks([])
        fig.suptitle(name)
        fig.savefig(path)
        plt.close(fig)
    return path


def summary_figure(rows, path) -> Path:
    """Median/mean depth error and runtime per frame."""
    path = Path(path)
    rows = [r for r in rows if r.errors_defined]
    names = [r.frame for r in rows]
    x = np.arange(len(rows))
    with plt.rc_context(STYLE):
        fig, (a0, a1) = plt.subplots(1, 2, figsize=(9, 3))
        a0.bar(x - 0.2, [r.median_err for r in rows], 0.4, label="median")
        a0.bar(x + 0.2, [r.mean_err for r in rows], 0.4, label="mean")
        a0.set_ylabel("abs. depth error")
        a0.legend(frameon=False)
        a1.bar(x, [r.runtime_ms for r in rows], 0.6, color="tab:gray")
        a1.set_ylabel("runtime [ms]")
        for ax in (a0, a1):
            ax.set_xticks(x, names, rotation=30, ha="right")
            ax.spines[["top", "right"]].set_visible(False)
        fig.savefig(path)
        plt.close(fig)
    return path


def write_report(result, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [frame_figure(name, pair, res, out / f"{name}_disparity.png")
             for name, (pair, res) in result.outputs.items()]
    paths.append(summary_figure(result.rows, out / "summary.png"))
    return paths
