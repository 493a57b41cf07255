import sys
import numpy as np
import pytest
from hypothesis import settings

from bdis.imagepyr import GrayImage

settings.register_profile("bdis", deadline=None, derandomize=True)
settings.load_profile("bdis")


def smooth_texture(h, w, seed=0, scale=3.0):
    """Band-limited random texture in [0.1, 0.9]; smooth enough for sub-pixel LK."""
    from scipy.ndimage import gaussian_filter

    rng = np.random.default_rng(seed)
    t = gaussian_filter(rng.random((h, w)), scale, mode="wrap")
    t = (t - t.min()) / (t.max() - t.min())
    return 0.1 + 0.8 * t


def shifted_pair(h, w, d, seed=0):
    """Left/right images with right(x) = left(x - d), built from one oversized texture."""
    pad = 8
    tex = smooth_texture(h, w + 2 * pad, seed)
    xs = np.arange(w) + pad
    left = tex[:, xs]
    src = xs - d
    x0 = np.floor(src).astype(int)
    a = src - x0
    right = (1 - a) * tex[:, x0] + a * tex[:, x0 + 1]
    return GrayImage(left), GrayImage(right)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
