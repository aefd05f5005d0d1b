"""Pinhole cameras, rotation homographies and image warping.

Frames. Camera orientations built by :func:`dirpose.so3.from_lookat` look
down their local -Z with +Y up. Everything that touches pixels (intrinsics,
homographies, relative poses, essential matrices) uses the image-aligned
frame instead: x right, y down, z forward, so that ``pixel ~ K @ X``. The
two are related by ``CV_FROM_GL = diag(1, -1, -1)``.

Pixel (0, 0) has its center at continuous coordinate (0, 0).

Relative pose convention: X1 = R @ X0 + s * t with unknown scale s > 0.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from dirpose.errors import UsageError
from dirpose.so3 import half_rotation

CV_FROM_GL = np.diag([1.0, -1.0, -1.0])


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise UsageError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise UsageError("image size must be at least 1x1")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def inverse(self) -> np.ndarray:
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy, "width": self.width, "height": self.height}


def intrinsics_from_fov(fov_deg: float, width: int, height: int) -> Intrinsics:
    """Square-pixel intrinsics from a horizontal field of view."""
    if not 0 < fov_deg < 180:
        raise UsageError(f"fov must lie in (0, 180) degrees, got {fov_deg}")
    f = (width / 2.0) / np.tan(np.radians(fov_deg) / 2.0)
    return Intrinsics(f, f, (width - 1) / 2.0, (height - 1) / 2.0, int(width), int(height))


@dataclass
class ImageBuffer:
    """Row-major image of shape (height, width, channels).

    Color lives in [0, 1]; depth is z-depth in meters. ``mask`` marks pixels
    that received a valid sample (None means all valid).
    """

    data: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self):
        d = np.asarray(self.data, dtype=float)
        if d.ndim == 2:
            d = d[..., None]
        if d.ndim != 3 or d.shape[2] not in (1, 3):
            raise UsageError(f"image must be HxW, HxWx1 or HxWx3, got {d.shape}")
        if not np.all(np.isfinite(d)):
            raise UsageError("image contains non-finite samples")
        self.data = d
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.shape != d.shape[:2]:
                raise UsageError("mask shape must match image")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def copy(self) -> ImageBuffer:
        return ImageBuffer(self.data.copy(), None if self.mask is None else self.mask.copy())


@dataclass(frozen=True)
class RelativePose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=float)
        t = np.asarray(self.translation, dtype=float)
        if r.shape != (3, 3) or t.shape != (3,):
            raise UsageError("pose needs a 3x3 rotation and a 3-vector translation")
        if abs(np.linalg.norm(t) - 1.0) > 1e-9:
            raise UsageError(f"translation must be unit length, got norm {np.linalg.norm(t)}")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)


# -- I/O --------------------------------------------------------------------------


def save_png(img: ImageBuffer, path: str | Path) -> None:
    arr = np.clip(np.round(img.data * 255.0), 0, 255).astype(np.uint8)
    mode = "L" if img.channels == 1 else "RGB"
    Image.fromarray(arr[..., 0] if img.channels == 1 else arr, mode=mode).save(path)


def load_png(path: str | Path) -> ImageBuffer:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=float) / 255.0
    return ImageBuffer(arr)


def save_depth(depth: ImageBuffer, path: str | Path) -> None:
    path = Path(path)
    path.write_bytes(depth.data[..., 0].astype("<f4").tobytes(order="C"))
    sidecar = {"w": depth.width, "h": depth.height, "unit": "m"}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar))


def load_depth(path: str | Path) -> ImageBuffer:
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    data = np.frombuffer(path.read_bytes(), dtype="<f4").astype(float)
    if data.size != meta["w"] * meta["h"]:
        raise UsageError(f"{path}: {data.size} samples, sidecar says {meta['w']}x{meta['h']}")
    return ImageBuffer(data.reshape(meta["h"], meta["w"]))


# -- projection -------------------------------------------------------------------


def project(k: Intrinsics, points: np.ndarray) -> np.ndarray:
    """Pixels of camera-frame points (N, 3) -> (N, 2)."""
    p = np.asarray(points, dtype=float) @ k.matrix.T
    return p[:, :2] / p[:, 2:3]


def unproject(k: Intrinsics, pixels: np.ndarray, depth: np.ndarray) -> np.ndarray:
    """Camera-frame points from pixels (N, 2) and z-depths (N,)."""
    pix = np.asarray(pixels, dtype=float)
    rays = np.column_stack([pix, np.ones(len(pix))]) @ k.inverse.T
    return rays * np.asarray(depth, dtype=float)[:, None]


def pixel_grid(width: int, height: int) -> np.ndarray:
    """All pixel centers as (height*width, 2) (x, y) pairs, row-major."""
    ys, xs = np.mgrid[0:height, 0:width]
    return np.column_stack([xs.ravel(), ys.ravel()]).astype(float)


# -- homographies and warping -------------------------------------------------------


def rotation_homography(k_in: Intrinsics, k_out: Intrinsics, rot: np.ndarray) -> np.ndarray:
    """K_out rot^T K_in^-1.

    Maps pixels of the input camera to a virtual camera at the same center
    whose axes are the input axes rotated by ``rot`` (so virtual-frame
    coordinates are rot^T X).
    """
    return k_out.matrix @ np.asarray(rot, dtype=float).T @ k_in.inverse


def bilinear_sample(data: np.ndarray, xs: np.ndarray, ys: np.ndarray, wrap_x: bool = False):
    """Sample (H, W, C) ``data`` at continuous pixel coordinates.

    Returns samples of shape xs.shape + (C,) and a validity mask; invalid
    samples are zero. With ``wrap_x`` the x axis is periodic and only y is
    bounds-checked.
    """
    h, w = data.shape[:2]
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    tol = 1e-9
    valid = np.isfinite(xs) & np.isfinite(ys) & (ys >= -tol) & (ys <= h - 1 + tol)
    if not wrap_x:
        valid &= (xs >= -tol) & (xs <= w - 1 + tol)
    xs = np.where(valid, xs, 0.0)
    ys = np.clip(np.where(valid, ys, 0.0), 0, h - 1)
    if wrap_x:
        xs = np.mod(xs, w)
    else:
        xs = np.clip(xs, 0, w - 1)
    x0 = np.floor(xs).astype(int)
    y0 = np.floor(ys).astype(int)
    fx = (xs - x0)[..., None]
    fy = (ys - y0)[..., None]
    if wrap_x:
        x0 %= w
        x1 = (x0 + 1) % w
    else:
        x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    top = data[y0, x0] * (1 - fx) + data[y0, x1] * fx
    bottom = data[y1, x0] * (1 - fx) + data[y1, x1] * fx
    out = top * (1 - fy) + bottom * fy
    return np.where(valid[..., None], out, 0.0), valid


def warp_image(src: ImageBuffer, h: np.ndarray, out_size: tuple[int, int]) -> ImageBuffer:
    """Inverse-mapping warp: output pixel p samples ``src`` at H^-1 p."""
    h = np.asarray(h, dtype=float)
    if abs(np.linalg.det(h)) <= 1e-12:
        raise UsageError("homography is singular")
    width, height = out_size
    h_inv = np.linalg.inv(h)
    pix = pixel_grid(width, height)
    p = np.column_stack([pix, np.ones(len(pix))]) @ h_inv.T
    with np.errstate(divide="ignore", invalid="ignore"):
        xs = p[:, 0] / p[:, 2]
        ys = p[:, 1] / p[:, 2]
    behind = ~(p[:, 2] > 0)
    xs[behind] = np.nan
    vals, valid = bilinear_sample(src.data, xs, ys)
    mask = valid.reshape(height, width)
    if src.mask is not None:
        m, _ = bilinear_sample(src.mask[..., None].astype(float), xs, ys)
        mask &= m[:, 0].reshape(height, width) > 1.0 - 1e-9
    return ImageBuffer(vals.reshape(height, width, src.channels), mask)


def derotation_homographies(k_in: Intrinsics, k_out: Intrinsics, r: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Homographies moving image 0 and image 1 into the middle frame of ``r``.

    With X1 = r r X0 + s t, the virtual frames X0' = r X0 and X1' = r^T X1
    differ by translation only: X1' = X0' + s r^T t.
    """
    r = np.asarray(r, dtype=float)
    return rotation_homography(k_in, k_out, r.T), rotation_homography(k_in, k_out, r)


def derotate_pair(
    img0: ImageBuffer,
    img1: ImageBuffer,
    r_est: np.ndarray,
    k_in: Intrinsics,
    k_out: Intrinsics,
) -> tuple[ImageBuffer, ImageBuffer, np.ndarray]:
    r = half_rotation(r_est)
    h0, h1 = derotation_homographies(k_in, k_out, r)
    size = (k_out.width, k_out.height)
    return warp_image(img0, h0, size), warp_image(img1, h1, size), r


def derotated_pose(pose: RelativePose, r: np.ndarray) -> RelativePose:
    """Ground truth expressed between the two virtual cameras of ``r``."""
    r = np.asarray(r, dtype=float)
    return RelativePose(r.T @ pose.rotation @ r.T, r.T @ pose.translation)
