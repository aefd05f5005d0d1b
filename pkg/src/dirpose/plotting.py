"""Figures written next to the CSV/JSON reports.

Every function takes an output path, draws with the non-interactive Agg
backend and closes its figure, so these are safe to call from batch runs.
"""

from __future__ import annotations

from contextlib import contextmanager
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from dirpose.sphere_grid import SphericalDistribution, expectation  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.direction": "in",
    "ytick.direction": "in",
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}


@contextmanager
def figure(path: str | Path, ncols: int = 1, width: float = 3.4, aspect: float = 0.75):
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, ncols, figsize=(width * ncols, width * aspect), squeeze=False)
        try:
            yield fig, axes[0] if ncols > 1 else axes[0, 0]
            fig.savefig(path, metadata={"Software": None})
        finally:
            plt.close(fig)


def plot_loss_trace(trace: Sequence[float], path: str | Path, title: str = "") -> None:
    t = np.asarray(trace, dtype=float)
    with figure(path) as (fig, ax):
        ax.plot(np.arange(len(t)), t, lw=1.0, color="0.2")
        ax.set_xlabel("step")
        ax.set_ylabel("total loss")
        # Loss starts large and ends near -1, so use symmetric log scaling.
        ax.set_yscale("symlog", linthresh=1.0)
        if title:
            ax.set_title(title)


def plot_distribution(dist: SphericalDistribution, path: str | Path, title: str = "", mark_expectation: bool = True) -> None:
    """Equirectangular heatmap of a distribution, colatitude down the rows."""
    spec = dist.spec
    with figure(path, width=4.0, aspect=0.55) as (fig, ax):
        im = ax.imshow(
            dist.probs,
            extent=(0.0, 360.0, 180.0, 0.0),
            aspect="auto",
            cmap="viridis",
            interpolation="nearest",
        )
        fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
        if mark_expectation:
            e = expectation(dist)
            n = np.linalg.norm(e)
            if n > 1e-12:
                v = e / n
                theta = np.degrees(np.arccos(np.clip(v[2], -1, 1)))
                phi = np.degrees(np.mod(np.arctan2(v[1], v[0]), 2 * np.pi))
                ax.plot([phi], [theta], "o", ms=4, mfc="tab:blue", mec="white")
        ax.set_xlabel("azimuth (deg)")
        ax.set_ylabel("colatitude (deg)")
        ax.set_title(title or f"{spec.height}x{spec.width} grid")


def plot_error_vs_rotation(runs, path: str | Path) -> None:
    """Rotation error against true rotation magnitude, one series per method."""
    with figure(path) as (fig, ax):
        for run in runs:
            ok = run.ok
            ax.scatter([r.rotation_magnitude_deg for r in ok], [r.rot_err_deg for r in ok], s=6, label=run.method)
        ax.set_xlabel("true rotation (deg)")
        ax.set_ylabel("rotation error (deg)")
        ax.legend(frameon=False)


def plot_error_vs_overlap(runs, path: str | Path, bins: Sequence[float] = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)) -> None:
    """Median translation error within overlap bins."""
    edges = np.asarray(bins, dtype=float)
    centers = 0.5 * (edges[:-1] + edges[1:])
    with figure(path) as (fig, ax):
        for run in runs:
            ov = np.array([r.overlap for r in run.ok])
            err = np.array([r.trans_err_deg for r in run.ok])
            med = [
                float(np.median(err[(ov >= lo) & (ov < hi)])) if np.any((ov >= lo) & (ov < hi)) else np.nan
                for lo, hi in zip(edges[:-1], edges[1:])
            ]
            ax.plot(100 * centers, med, marker="o", ms=3, label=run.method)
        ax.set_xlabel("overlap (%)")
        ax.set_ylabel("median translation error (deg)")
        ax.legend(frameon=False)


def save_overlay_figure(img0, img1, path: str | Path, titles: tuple[str, str] = ("image 0", "image 1")) -> None:
    with figure(path, ncols=2, width=3.0, aspect=1.0) as (fig, axes):
        for ax, img, title in zip(axes, (img0, img1), titles):
            data = img.data if img.channels == 3 else img.data[..., 0]
            ax.imshow(np.clip(data, 0, 1), cmap=None if img.channels == 3 else "gray", interpolation="nearest")
            ax.set_title(title)
            ax.axis("off")
