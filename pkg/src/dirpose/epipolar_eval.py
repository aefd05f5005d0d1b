"""Epipolar geometry, error statistics and the two-stage evaluation harness."""

from __future__ import annotations

import abc
import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from dirpose.camera import ImageBuffer, Intrinsics, RelativePose, derotate_pair, derotated_pose
from dirpose.errors import AmbiguousHalfRotation, DegenerateDirection, UsageError
from dirpose.grid_fit import FitConfig, fit_direction, fit_rotation
from dirpose.pano import PosePair
from dirpose.so3 import geodesic_distance, half_rotation, perturb_rotation, skew
from dirpose.sphere_grid import GridSpec

log = logging.getLogger(__name__)

# Qualitative palette; index i uses color i mod len.
PALETTE = np.array(
    [
        [0.894, 0.102, 0.110],
        [0.216, 0.494, 0.722],
        [0.302, 0.686, 0.290],
        [0.596, 0.306, 0.639],
        [1.000, 0.498, 0.000],
        [1.000, 1.000, 0.200],
        [0.651, 0.337, 0.157],
        [0.969, 0.506, 0.749],
    ]
)


# -- geometry --------------------------------------------------------------------------


def essential_from_pose(pose: RelativePose) -> np.ndarray:
    """E = [t]x R, so that x1^T E x0 = 0 for normalized correspondences."""
    return skew(pose.translation) @ pose.rotation


def is_essential(e: np.ndarray, tol: float = 1e-9) -> bool:
    s = np.linalg.svd(np.asarray(e, dtype=float), compute_uv=False)
    return bool(s[0] > 0 and s[2] / s[0] < tol and abs(s[0] - s[1]) / s[0] < tol)


def epipolar_line(e: np.ndarray, x0: np.ndarray, k0: Intrinsics, k1: Intrinsics) -> np.ndarray:
    """Line (a, b, c) in image 1, with a^2 + b^2 = 1, for pixel ``x0`` of image 0."""
    x = np.array([x0[0], x0[1], 1.0])
    line = k1.inverse.T @ np.asarray(e, dtype=float) @ k0.inverse @ x
    return line / np.hypot(line[0], line[1])


def point_line_distance(line: np.ndarray, x: np.ndarray) -> float:
    return float(abs(line[0] * x[0] + line[1] * x[1] + line[2]) / np.hypot(line[0], line[1]))


def epipole(pose: RelativePose, k1: Intrinsics) -> np.ndarray:
    """Homogeneous image of camera 0's center in image 1 (proportional to K1 t)."""
    return k1.matrix @ pose.translation


# -- errors and ranks --------------------------------------------------------------------


def direction_angle_deg(a: np.ndarray, b: np.ndarray) -> float:
    """Angle between unit vectors; atan2 form of arccos(a . b)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.degrees(np.arctan2(np.linalg.norm(np.cross(a, b)), np.clip(a @ b, -1.0, 1.0))))


def angular_errors(pred: RelativePose, truth: RelativePose) -> tuple[float, float]:
    rot = float(np.degrees(geodesic_distance(pred.rotation, truth.rotation)))
    return rot, direction_angle_deg(pred.translation, truth.translation)


@dataclass(frozen=True)
class ErrorStats:
    mean_deg: float
    median_deg: float
    per_pair: tuple[float, ...]

    @classmethod
    def from_errors(cls, errors: Sequence[float]) -> ErrorStats:
        e = np.asarray(errors, dtype=float)
        if e.size == 0:
            return cls(float("nan"), float("nan"), ())
        return cls(float(np.mean(e)), float(np.median(e)), tuple(float(x) for x in e))


def rank_methods(errors_by_method: Mapping[str, Sequence[float] | Mapping[str, float]]) -> dict[str, float]:
    """Mean per-pair rank of each method; ties share the average rank.

    Values are either equal-length sequences (aligned by position) or
    mappings keyed by pair id, which must all cover the same ids.
    """
    names = list(errors_by_method)
    if not names:
        return {}
    first = errors_by_method[names[0]]
    if isinstance(first, Mapping):
        ids = sorted(first)
        for n in names:
            m = errors_by_method[n]
            if not isinstance(m, Mapping) or set(m) != set(ids):
                raise UsageError(f"method {n!r} does not cover the same pairs")
        table = np.array([[errors_by_method[n][i] for i in ids] for n in names], dtype=float)
    else:
        rows = [np.asarray(errors_by_method[n], dtype=float) for n in names]
        if len({len(r) for r in rows}) != 1:
            raise UsageError("methods were evaluated on different numbers of pairs")
        table = np.stack(rows)
    if table.shape[1] == 0:
        raise UsageError("no pairs to rank")
    ranks = rankdata(table, method="average", axis=0)
    return {n: float(r) for n, r in zip(names, ranks.mean(axis=1))}


# -- predictors ------------------------------------------------------------------------------


class Predictor(abc.ABC):
    """Maps a pose pair to a relative pose estimate.

    Rotation predictors are read for ``rotation`` only; translation predictors
    receive the derotated pair and are read for ``translation`` only.
    ``serial`` predictors are never called concurrently.
    """

    name: str = "predictor"
    serial: bool = False

    @abc.abstractmethod
    def predict(self, pair: PosePair) -> RelativePose: ...


class OraclePredictor(Predictor):
    """Returns the ground truth stored on the pair."""

    def __init__(self, name: str = "oracle"):
        self.name = name

    def predict(self, pair: PosePair) -> RelativePose:
        return pair.pose


class GridFitPredictor(Predictor):
    """Fits sphere grids to vMF targets built from the pair's ground truth.

    Stands in for a trained network: the estimate carries whatever error the
    distributional head leaves after ``cfg.steps`` descent steps.
    """

    def __init__(
        self,
        kind: str,
        kappa: float = 10.0,
        spec: GridSpec = GridSpec(64, 64),
        cfg: FitConfig = FitConfig(),
        variant: str = "svd9d",
        name: str | None = None,
    ):
        if kind not in ("rotation", "translation"):
            raise UsageError(f"kind must be 'rotation' or 'translation', got {kind!r}")
        self.kind = kind
        self.kappa = kappa
        self.spec = spec
        self.cfg = cfg
        self.variant = variant
        self.name = name or f"gridfit-{variant if kind == 'rotation' else 't'}"

    def predict(self, pair: PosePair) -> RelativePose:
        truth = pair.pose
        if self.kind == "rotation":
            rot, _ = fit_rotation(truth.rotation, self.kappa, self.spec, self.cfg, self.variant)
            return RelativePose(rot, truth.translation)
        report = fit_direction(truth.translation, self.kappa, self.spec, self.cfg)
        return RelativePose(truth.rotation, report.final_direction)


# -- two-stage pipeline ------------------------------------------------------------------------


@dataclass
class PairResult:
    id: str
    status: str  # "ok" or "skipped"
    estimate: RelativePose | None = None
    rot_err_deg: float = float("nan")
    trans_err_deg: float = float("nan")
    rotation_magnitude_deg: float = float("nan")
    overlap: float = float("nan")
    degenerate_translation: bool = False
    half_rotation: np.ndarray | None = None
    message: str = ""

    def to_dict(self) -> dict:
        out = {
            "id": self.id,
            "status": self.status,
            "rot_err_deg": self.rot_err_deg,
            "trans_err_deg": self.trans_err_deg,
            "rotation_magnitude_deg": self.rotation_magnitude_deg,
            "overlap": self.overlap,
            "degenerate_translation": self.degenerate_translation,
        }
        if self.estimate is not None:
            out["R"] = self.estimate.rotation.ravel().tolist()
            out["t"] = self.estimate.translation.tolist()
        if self.message:
            out["message"] = self.message
        return out


@dataclass
class PipelineRun:
    method: str
    results: list[PairResult] = field(default_factory=list)

    @property
    def ok(self) -> list[PairResult]:
        return [r for r in self.results if r.status == "ok"]

    @property
    def skipped(self) -> list[PairResult]:
        return [r for r in self.results if r.status != "ok"]

    def rotation_stats(self) -> ErrorStats:
        return ErrorStats.from_errors([r.rot_err_deg for r in self.ok])

    def translation_stats(self) -> ErrorStats:
        return ErrorStats.from_errors([r.trans_err_deg for r in self.ok])


def _two_stage_one(
    pair: PosePair,
    rot_predictor: Predictor,
    trans_predictor: Predictor,
    perturb: float,
    k_out: Intrinsics | None,
    seed: int,
    warp_images: bool,
) -> PairResult:
    truth = pair.pose
    base = PairResult(
        id=pair.id,
        status="ok",
        rotation_magnitude_deg=float(np.degrees(geodesic_distance(truth.rotation, np.eye(3)))),
        overlap=pair.overlap,
    )
    r_est = rot_predictor.predict(pair).rotation
    if perturb > 0:
        r_est = perturb_rotation(r_est, perturb, np.random.default_rng(seed))
    try:
        r = half_rotation(r_est)
    except AmbiguousHalfRotation as exc:
        log.warning("pair %s skipped: %s", pair.id, exc)
        return replace(base, status="skipped", message=str(exc))

    k_in = pair.intrinsics
    k_virtual = k_out or k_in
    if warp_images:
        img0, img1, _ = derotate_pair(pair.img0, pair.img1, r_est, k_in, k_virtual)
    else:
        img0, img1 = pair.img0, pair.img1
    derotated = replace(
        pair,
        img0=img0,
        img1=img1,
        depth0=None,
        depth1=None,
        pose=derotated_pose(truth, r),
        intrinsics=k_virtual,
    )
    degenerate = False
    try:
        t_prime = trans_predictor.predict(derotated).translation
        t_est = r @ t_prime
    except DegenerateDirection:
        degenerate = True
        t_est = -truth.translation  # scored as 180 degrees

    estimate = RelativePose(r_est, t_est / np.linalg.norm(t_est))
    rot_err, trans_err = angular_errors(estimate, truth)
    return replace(
        base,
        estimate=estimate,
        rot_err_deg=rot_err,
        trans_err_deg=180.0 if degenerate else trans_err,
        degenerate_translation=degenerate,
        half_rotation=r,
    )


def run_two_stage(
    pairs: Sequence[PosePair],
    rot_predictor: Predictor,
    trans_predictor: Predictor,
    perturb_deg: float = 0.0,
    k_out: Intrinsics | None = None,
    rng: np.random.Generator | None = None,
    warp_images: bool = True,
    threads: int = 1,
    method: str | None = None,
) -> PipelineRun:
    """Rotate, derotate with the half rotation, then estimate translation.

    The translation predictor answers in the derotated frame; its answer is
    mapped back with t = r t'. Pairs whose estimated rotation is too close to
    pi to halve are kept in the results with status "skipped".
    """
    if perturb_deg < 0:
        raise UsageError("perturbation must be non-negative")
    rng = rng or np.random.default_rng(0)
    seeds = rng.integers(0, 2**63 - 1, size=len(pairs))
    perturb = float(np.radians(perturb_deg))

    def one(idx: int) -> PairResult:
        return _two_stage_one(pairs[idx], rot_predictor, trans_predictor, perturb, k_out, int(seeds[idx]), warp_images)

    serial = threads <= 1 or rot_predictor.serial or trans_predictor.serial
    if serial:
        results = [one(i) for i in range(len(pairs))]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, range(len(pairs))))
    name = method or f"{rot_predictor.name}+{trans_predictor.name}"
    return PipelineRun(name, results)


RESULT_COLUMNS = ["method", "mean_rot", "med_rot", "rank_rot", "mean_trans", "med_trans", "rank_trans"]


def results_table(runs: Sequence[PipelineRun]) -> list[dict]:
    """One row per method: mean, median and mean rank of both errors.

    Ranks are computed over pairs that every method completed.
    """
    common = set.intersection(*({r.id for r in run.ok} for run in runs)) if runs else set()
    rot = {run.method: {r.id: r.rot_err_deg for r in run.ok if r.id in common} for run in runs}
    trans = {run.method: {r.id: r.trans_err_deg for r in run.ok if r.id in common} for run in runs}
    rank_rot = rank_methods(rot) if common else {run.method: float("nan") for run in runs}
    rank_trans = rank_methods(trans) if common else {run.method: float("nan") for run in runs}
    rows = []
    for run in runs:
        rs, ts = run.rotation_stats(), run.translation_stats()
        rows.append(
            {
                "method": run.method,
                "mean_rot": rs.mean_deg,
                "med_rot": rs.median_deg,
                "rank_rot": rank_rot[run.method],
                "mean_trans": ts.mean_deg,
                "med_trans": ts.median_deg,
                "rank_trans": rank_trans[run.method],
            }
        )
    return rows


def write_results_csv(rows: Sequence[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in row.items()})


# -- overlays -------------------------------------------------------------------------------------


def line_pixels(line: np.ndarray, width: int, height: int) -> np.ndarray:
    """Integer (x, y) pixels of line a x + b y + c = 0 clipped to the image.

    Steps along the axis the line is most aligned with, so the trace has no
    gaps. Returns an empty (0, 2) array when the line misses the image.
    """
    a, b, c = (float(v) for v in line)
    if abs(b) >= abs(a):
        if b == 0:
            return np.zeros((0, 2), dtype=int)
        xs = np.arange(width, dtype=float)
        ys = -(a * xs + c) / b
    else:
        ys = np.arange(height, dtype=float)
        xs = -(b * ys + c) / a
    keep = (xs >= -0.5) & (xs < width - 0.5) & (ys >= -0.5) & (ys < height - 0.5)
    pts = np.column_stack([np.round(xs[keep]), np.round(ys[keep])]).astype(int)
    return pts


def overlay_lines(pair: PosePair, poses: Sequence[tuple[str, RelativePose]], points: np.ndarray) -> list[tuple[str, int, np.ndarray]]:
    """(pose name, point index, line in image 0) for every pose and image-1 point."""
    k = pair.intrinsics
    out = []
    for name, pose in poses:
        e = essential_from_pose(pose)
        for idx, x1 in enumerate(np.asarray(points, dtype=float).reshape(-1, 2)):
            # x0^T E^T x1 = 0, so E^T carries image-1 points to lines in image 0.
            out.append((name, idx, epipolar_line(e.T, x1, k, k)))
    return out


def _stamp(data: np.ndarray, x: float, y: float, color: np.ndarray, radius: int = 1) -> None:
    h, w = data.shape[:2]
    cx, cy = int(round(x)), int(round(y))
    y0, y1 = max(cy - radius, 0), min(cy + radius + 1, h)
    x0, x1 = max(cx - radius, 0), min(cx + radius + 1, w)
    if y0 < y1 and x0 < x1:
        data[y0:y1, x0:x1] = color[: data.shape[2]]


def render_epipolar_overlay(
    pair: PosePair,
    poses: Sequence[tuple[str, RelativePose]],
    points: np.ndarray,
) -> tuple[ImageBuffer, ImageBuffer]:
    """Points on image 1 and their epipolar lines on image 0, colored by point index.

    The first pose is drawn solid; later poses are drawn dashed so several
    estimates can share one overlay.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    k = pair.intrinsics
    if points.size and (
        np.any(points < -0.5) or np.any(points[:, 0] >= k.width - 0.5) or np.any(points[:, 1] >= k.height - 0.5)
    ):
        raise UsageError("overlay points must lie inside image 1")
    out0 = pair.img0.copy()
    out1 = pair.img1.copy()
    if len(points) == 0:
        return out0, out1
    names = [name for name, _ in poses]
    for name, idx, line in overlay_lines(pair, poses, points):
        color = PALETTE[idx % len(PALETTE)]
        pix = line_pixels(line, k.width, k.height)
        if names.index(name) > 0:
            pix = pix[(np.arange(len(pix)) // 4) % 2 == 0]
        out0.data[pix[:, 1], pix[:, 0]] = color[: out0.channels]
    for idx, (x, y) in enumerate(points):
        _stamp(out1.data, x, y, PALETTE[idx % len(PALETTE)])
    return out0, out1
