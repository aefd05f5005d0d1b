from __future__ import annotations

import numpy as np
import pytest
from hypothesis import settings

from dirpose.camera import project, unproject
from dirpose.pano import SceneSpec, generate_dataset

settings.register_profile("default", max_examples=50, deadline=None)
settings.load_profile("default")

# Acceptance lines collected during the run and repeated in the terminal summary.
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def scene():
    return SceneSpec()


@pytest.fixture(scope="session")
def small_pairs(scene):
    """Eight low-resolution pairs with the default regime."""
    return generate_dataset(scene, 8, 45.0, 2.25, fov_deg=90.0, resolution=64, seed=3, pano_resolution=(512, 256))


def correspondences(pair, n: int, rng: np.random.Generator):
    """Up to ``n`` exact (x0, x1, X0) correspondences of co-visible image-0 pixels.

    Uses the stored z-depth and the metric pose; a pixel counts as co-visible
    when its surface point lands inside image 1 with matching depth.
    """
    k = pair.intrinsics
    st = pair.baseline_m * pair.pose.translation
    h, w = pair.depth0.data.shape[:2]
    ys, xs = np.divmod(rng.permutation(h * w), w)
    x0 = np.column_stack([xs, ys]).astype(float)
    X0 = unproject(k, x0, pair.depth0.data[ys, xs, 0])
    X1 = X0 @ pair.pose.rotation.T + st
    front = X1[:, 2] > 1e-6
    x1 = np.full_like(x0, -1.0)
    x1[front] = project(k, X1[front])
    inside = front & (x1[:, 0] >= 0) & (x1[:, 0] <= w - 1) & (x1[:, 1] >= 0) & (x1[:, 1] <= h - 1)
    cols = np.clip(np.round(x1[:, 0]).astype(int), 0, w - 1)
    rows = np.clip(np.round(x1[:, 1]).astype(int), 0, h - 1)
    z1 = pair.depth1.data[rows, cols, 0]
    ok = inside & (np.abs(z1 - X1[:, 2]) < 0.02 * z1)
    idx = np.flatnonzero(ok)[:n]
    return x0[idx], x1[idx], X0[idx]
