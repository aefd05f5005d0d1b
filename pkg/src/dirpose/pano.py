"""Synthetic wide-baseline pairs cut from rendered panoramas.

The scene is an axis-aligned box room centered at the world origin with
checkerboard walls. World up is +Z, matching the sphere grid convention, so
a panorama is an equirectangular grid whose pixel (i, j) sees direction
rho(theta_i, phi_j).

Panorama depth is range (distance along the ray). Perspective depth is
z-depth along the optical axis.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from dirpose.camera import (
    CV_FROM_GL,
    ImageBuffer,
    Intrinsics,
    RelativePose,
    bilinear_sample,
    intrinsics_from_fov,
    load_depth,
    load_png,
    pixel_grid,
    project,
    save_depth,
    save_png,
    unproject,
)
from dirpose.errors import DegenerateFrame, UsageError
from dirpose.so3 import from_lookat, geodesic_distance, sample_cap
from dirpose.sphere_grid import GridSpec

WORLD_UP = np.array([0.0, 0.0, 1.0])
BAND_ELEVATION = np.pi / 4
DEPTH_AGREEMENT = 0.02
CENTER_MARGIN = 0.25
MAX_RESAMPLES = 1000

# Face order: -X, +X, -Y, +Y, -Z, +Z.
FACE_NAMES = ("-x", "+x", "-y", "+y", "-z", "+z")


@dataclass(frozen=True)
class SceneSpec:
    half_extents: tuple[float, float, float] = (3.0, 3.0, 1.5)
    cell_size: float = 0.5
    seed: int = 0
    face_colors: tuple | None = None

    def __post_init__(self):
        h = tuple(float(x) for x in self.half_extents)
        if len(h) != 3 or min(h) <= 0:
            raise UsageError(f"half extents must be three positive numbers, got {self.half_extents}")
        if not self.cell_size > 0:
            raise UsageError("cell size must be positive")
        object.__setattr__(self, "half_extents", h)

    @property
    def colors(self) -> np.ndarray:
        """(6, 2, 3) RGB pair per face."""
        if self.face_colors is not None:
            c = np.asarray(self.face_colors, dtype=float)
            if c.shape != (6, 2, 3):
                raise UsageError("face_colors must have shape (6, 2, 3)")
            return c
        rng = np.random.default_rng([self.seed, 0xC010])
        base = rng.uniform(0.25, 0.95, size=(6, 1, 3))
        dark = base * rng.uniform(0.2, 0.55, size=(6, 1, 1))
        return np.concatenate([base, dark], axis=1)

    def contains(self, point: np.ndarray, margin: float = 0.0) -> bool:
        return bool(np.all(np.abs(np.asarray(point, dtype=float)) < np.asarray(self.half_extents) - margin))


@dataclass
class Panorama:
    color: ImageBuffer
    depth: ImageBuffer
    center: np.ndarray


@dataclass
class PosePair:
    img0: ImageBuffer
    img1: ImageBuffer
    depth0: ImageBuffer | None
    depth1: ImageBuffer | None
    pose: RelativePose
    fov_deg: float
    intrinsics: Intrinsics
    baseline_m: float = 1.0
    overlap: float = float("nan")
    id: str = ""
    metadata: dict = field(default_factory=dict)


# -- rendering ------------------------------------------------------------------


def ray_box(scene: SceneSpec, origin: np.ndarray, dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exit distance and face index for rays leaving ``origin`` inside the box."""
    h = np.asarray(scene.half_extents)
    o = np.asarray(origin, dtype=float)
    d = np.asarray(dirs, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        wall = np.where(d >= 0, h, -h)
        t = (wall - o) / d
    t = np.where(np.abs(d) > 0, t, np.inf)
    axis = np.argmin(t, axis=-1)
    dist = np.take_along_axis(t, axis[..., None], axis=-1)[..., 0]
    sign = np.take_along_axis(d, axis[..., None], axis=-1)[..., 0] >= 0
    return dist, 2 * axis + sign.astype(int)


def shade(scene: SceneSpec, points: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Checkerboard color of wall points."""
    colors = scene.colors
    axis = faces // 2
    # The two in-plane coordinates for each face axis.
    in_plane = np.array([[1, 2], [0, 2], [0, 1]])[axis]
    u = np.take_along_axis(points, in_plane[..., :1], axis=-1)[..., 0]
    v = np.take_along_axis(points, in_plane[..., 1:], axis=-1)[..., 0]
    parity = (np.floor(u / scene.cell_size) + np.floor(v / scene.cell_size)).astype(int) % 2
    return colors[faces, parity]


def render_pano(scene: SceneSpec, center: np.ndarray, resolution: tuple[int, int] = (1024, 512)) -> Panorama:
    """Equirectangular color + range panorama seen from ``center``."""
    center = np.asarray(center, dtype=float)
    if not scene.contains(center):
        raise UsageError(f"center {center.tolist()} is not strictly inside the room")
    width, height = resolution
    dirs = GridSpec(int(height), int(width)).directions
    dist, faces = ray_box(scene, center, dirs)
    color = shade(scene, center + dist[..., None] * dirs, faces)
    return Panorama(ImageBuffer(color), ImageBuffer(dist), center.copy())


# -- sampling -----------------------------------------------------------------------


def sample_band_direction(rng: np.random.Generator, max_elevation: float = BAND_ELEVATION) -> np.ndarray:
    """Area-uniform direction with elevation in [-max_elevation, max_elevation]."""
    z = rng.uniform(-np.sin(max_elevation), np.sin(max_elevation))
    phi = rng.uniform(0.0, 2 * np.pi)
    r = np.sqrt(1.0 - z * z)
    return np.array([r * np.cos(phi), r * np.sin(phi), z])


def sample_lookat_pair(cone_aperture_deg: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """First look-at from the equatorial band, second from a cap around it.

    ``cone_aperture_deg`` is the cap half-angle.
    """
    if not 0 < cone_aperture_deg <= 180:
        raise UsageError(f"cone aperture must lie in (0, 180], got {cone_aperture_deg}")
    l1 = sample_band_direction(rng)
    l2 = sample_cap(l1, np.radians(cone_aperture_deg), rng)
    return l1, l2


# -- projection -----------------------------------------------------------------------


def camera_to_world(orientation: np.ndarray) -> np.ndarray:
    """Image-frame (x right, y down, z forward) axes of a look-at camera, in world coordinates."""
    return np.asarray(orientation, dtype=float) @ CV_FROM_GL


def _pano_coords(dirs: np.ndarray, width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    theta = np.arccos(np.clip(dirs[:, 2], -1.0, 1.0))
    phi = np.mod(np.arctan2(dirs[:, 1], dirs[:, 0]), 2 * np.pi)
    return phi * width / (2 * np.pi), theta * height / np.pi - 0.5


def pano_to_perspective(pano: Panorama, orientation: np.ndarray, k: Intrinsics) -> tuple[ImageBuffer, ImageBuffer]:
    """Perspective color (bilinear) and z-depth (nearest neighbour) for a look-at camera."""
    q = camera_to_world(orientation)
    pix = pixel_grid(k.width, k.height)
    rays_cam = np.column_stack([pix, np.ones(len(pix))]) @ k.inverse.T
    norms = np.linalg.norm(rays_cam, axis=1)
    dirs = (rays_cam / norms[:, None]) @ q.T
    ph, pw = pano.color.height, pano.color.width
    xs, ys = _pano_coords(dirs, pw, ph)
    color, _ = bilinear_sample(pano.color.data, xs, np.clip(ys, 0, ph - 1), wrap_x=True)
    rows = np.clip(np.round(ys).astype(int), 0, ph - 1)
    cols = np.round(xs).astype(int) % pw
    rng_depth = pano.depth.data[rows, cols, 0]
    z = rng_depth / norms
    shape = (k.height, k.width)
    return ImageBuffer(color.reshape(*shape, 3)), ImageBuffer(z.reshape(shape))


# -- overlap ---------------------------------------------------------------------------


def _covisible_fraction(
    depth_src: ImageBuffer,
    depth_dst: ImageBuffer,
    k_src: Intrinsics,
    k_dst: Intrinsics,
    rot: np.ndarray,
    trans: np.ndarray,
    tol: float,
) -> float:
    d = depth_src.data[..., 0].ravel()
    pix = pixel_grid(k_src.width, k_src.height)
    valid = d > 0
    if not np.any(valid):
        return 0.0
    pts = unproject(k_src, pix[valid], d[valid]) @ rot.T + trans
    front = pts[:, 2] > 1e-9
    hits = np.zeros(len(pts), dtype=bool)
    p = project(k_dst, pts[front])
    cols = np.round(p[:, 0]).astype(int)
    rows = np.round(p[:, 1]).astype(int)
    inside = (cols >= 0) & (cols < k_dst.width) & (rows >= 0) & (rows < k_dst.height)
    z_dst = np.zeros(len(p))
    z_dst[inside] = depth_dst.data[rows[inside], cols[inside], 0]
    agree = inside & (z_dst > 0) & (np.abs(pts[front, 2] - z_dst) <= tol * np.where(z_dst > 0, z_dst, 1.0))
    hits[np.flatnonzero(front)] = agree
    return float(np.count_nonzero(hits)) / d.size


def compute_overlap(pair: PosePair, tol: float = DEPTH_AGREEMENT) -> float:
    """min(|I0 n I1| / |I0|, |I0 n I1| / |I1|) from depth-consistent reprojection."""
    if pair.depth0 is None or pair.depth1 is None:
        raise UsageError("overlap needs depth for both images")
    r = pair.pose.rotation
    st = pair.baseline_m * pair.pose.translation
    k = pair.intrinsics
    f01 = _covisible_fraction(pair.depth0, pair.depth1, k, k, r, st, tol)
    f10 = _covisible_fraction(pair.depth1, pair.depth0, k, k, r.T, -r.T @ st, tol)
    return min(f01, f10)


# -- dataset generation -----------------------------------------------------------------


def relative_pose_from_world(q0: np.ndarray, c0: np.ndarray, q1: np.ndarray, c1: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """R and metric s*t with X1 = R X0 + s t, for image-frame camera-to-world axes q and centers c."""
    return q1.T @ q0, q1.T @ (np.asarray(c0) - np.asarray(c1))


def _check_baseline(scene: SceneSpec, baseline_m: float) -> None:
    if not baseline_m > 0:
        raise UsageError("baseline must be positive; a zero baseline leaves the translation direction undefined")
    hx, hy, _ = scene.half_extents
    reach = 2 * (max(hx, hy) - CENTER_MARGIN)
    if baseline_m >= reach:
        raise UsageError(f"baseline {baseline_m} m does not fit inside the room (limit {reach:.3f} m)")


def _sample_centers(scene: SceneSpec, baseline_m: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    h = np.asarray(scene.half_extents) - CENTER_MARGIN
    for _ in range(MAX_RESAMPLES):
        a = rng.uniform(0, 2 * np.pi)
        offset = 0.5 * baseline_m * np.array([np.cos(a), np.sin(a), 0.0])
        mid = rng.uniform(-h, h)
        mid[2] = rng.uniform(-0.5 * h[2], 0.5 * h[2])
        c0, c1 = mid - offset, mid + offset
        if scene.contains(c0, CENTER_MARGIN) and scene.contains(c1, CENTER_MARGIN):
            return c0, c1
    raise UsageError(f"could not place a {baseline_m} m baseline inside the room")


def generate_pair(
    scene: SceneSpec,
    index: int,
    seed: int,
    cone_aperture_deg: float,
    baseline_m: float,
    fov_deg: float,
    resolution: int,
    pano_resolution: tuple[int, int] = (1024, 512),
    max_rotation_deg: float | None = None,
    keep_panos: bool = False,
) -> tuple[PosePair, tuple[Panorama, Panorama] | None]:
    """One pair from its own random stream derived from (seed, index)."""
    _check_baseline(scene, baseline_m)
    rng = np.random.default_rng([seed, index])
    c0, c1 = _sample_centers(scene, baseline_m, rng)
    for _ in range(MAX_RESAMPLES):
        l1, l2 = sample_lookat_pair(cone_aperture_deg, rng)
        try:
            o0 = from_lookat(l1, WORLD_UP)
            o1 = from_lookat(l2, WORLD_UP)
        except DegenerateFrame:
            continue
        rot, st = relative_pose_from_world(camera_to_world(o0), c0, camera_to_world(o1), c1)
        if max_rotation_deg is None or np.degrees(geodesic_distance(rot, np.eye(3))) <= max_rotation_deg:
            break
    else:
        raise UsageError("rotation bound unreachable with this cone aperture")
    k = intrinsics_from_fov(fov_deg, resolution, resolution)
    p0 = render_pano(scene, c0, pano_resolution)
    p1 = render_pano(scene, c1, pano_resolution)
    img0, depth0 = pano_to_perspective(p0, o0, k)
    img1, depth1 = pano_to_perspective(p1, o1, k)
    pose = RelativePose(rot, st / np.linalg.norm(st))
    pair = PosePair(
        img0=img0,
        img1=img1,
        depth0=depth0,
        depth1=depth1,
        pose=pose,
        fov_deg=float(fov_deg),
        intrinsics=k,
        baseline_m=float(baseline_m),
        id=f"pair_{index:05d}",
        metadata={
            "lookat0": l1.tolist(),
            "lookat1": l2.tolist(),
            "center0": c0.tolist(),
            "center1": c1.tolist(),
            "orientation0": o0.ravel().tolist(),
            "orientation1": o1.ravel().tolist(),
        },
    )
    pair.overlap = compute_overlap(pair)
    return pair, ((p0, p1) if keep_panos else None)


def generate_dataset(
    scene: SceneSpec,
    n_pairs: int,
    cone_aperture_deg: float,
    baseline_m: float,
    fov_deg: float = 90.0,
    resolution: int = 256,
    seed: int = 0,
    pano_resolution: tuple[int, int] = (1024, 512),
    max_rotation_deg: float | None = None,
    threads: int = 1,
) -> list[PosePair]:
    """Generate ``n_pairs`` pairs; output order and content do not depend on ``threads``."""
    if int(n_pairs) != n_pairs or n_pairs < 1:
        raise UsageError(f"n_pairs must be a positive integer, got {n_pairs}")
    _check_baseline(scene, baseline_m)

    def one(i: int) -> PosePair:
        pair, _ = generate_pair(
            scene, i, seed, cone_aperture_deg, baseline_m, fov_deg, resolution, pano_resolution, max_rotation_deg
        )
        return pair

    if threads <= 1:
        return [one(i) for i in range(n_pairs)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(one, range(n_pairs)))


# -- manifests -----------------------------------------------------------------------------


def manifest_record(pair: PosePair, paths: dict[str, str]) -> dict:
    return {
        "id": pair.id,
        "R": pair.pose.rotation.ravel().tolist(),
        "t": pair.pose.translation.tolist(),
        "fov_deg": pair.fov_deg,
        "overlap": pair.overlap,
        **paths,
        "resolution": [pair.intrinsics.width, pair.intrinsics.height],
        "baseline_m": pair.baseline_m,
        **pair.metadata,
    }


def write_pair(pair: PosePair, out_dir: str | Path) -> dict:
    """Write images/depths for one pair and return its manifest record."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "img0": f"{pair.id}_img0.png",
        "img1": f"{pair.id}_img1.png",
        "depth0": f"{pair.id}_depth0.f32",
        "depth1": f"{pair.id}_depth1.f32",
    }
    save_png(pair.img0, out_dir / paths["img0"])
    save_png(pair.img1, out_dir / paths["img1"])
    save_depth(pair.depth0, out_dir / paths["depth0"])
    save_depth(pair.depth1, out_dir / paths["depth1"])
    return manifest_record(pair, paths)


def write_manifest(records: list[dict], path: str | Path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=False) + "\n")


def read_manifest(path: str | Path) -> list[dict]:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"manifest not found: {path}")
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def load_pair(record: dict, base_dir: str | Path) -> PosePair:
    base = Path(base_dir)
    img0 = load_png(base / record["img0"])
    img1 = load_png(base / record["img1"])
    depth0 = load_depth(base / record["depth0"]) if record.get("depth0") else None
    depth1 = load_depth(base / record["depth1"]) if record.get("depth1") else None
    k = intrinsics_from_fov(record["fov_deg"], img0.width, img0.height)
    t = np.asarray(record["t"], dtype=float)
    pose = RelativePose(np.asarray(record["R"], dtype=float).reshape(3, 3), t / np.linalg.norm(t))
    extra = {key: record[key] for key in record if key.startswith(("lookat", "center", "orientation"))}
    return PosePair(
        img0=img0,
        img1=img1,
        depth0=depth0,
        depth1=depth1,
        pose=pose,
        fov_deg=float(record["fov_deg"]),
        intrinsics=k,
        baseline_m=float(record.get("baseline_m", 1.0)),
        overlap=float(record.get("overlap", float("nan"))),
        id=str(record["id"]),
        metadata=extra,
    )
