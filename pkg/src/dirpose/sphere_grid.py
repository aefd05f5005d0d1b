"""Equirectangular discretization of the unit sphere.

Convention used by every module in the package:

  - colatitude theta is measured from +Z, azimuth phi from +X toward +Y
  - rho(theta, phi) = (sin theta cos phi, sin theta sin phi, cos theta)
  - grids are row-major in theta: ``values[i, j]`` sits at (theta_i, phi_j)
  - theta_i = (2i + 1) pi / (2H),  phi_j = 2 pi j / W

Probabilities are normalized under the discrete measure sum_ij P_ij sin(theta_i),
which is what the expectation and the distribution loss integrate against.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Literal

import numpy as np

from dirpose.errors import DegenerateDirection, UsageError

Activation = Literal["softplus", "exp"]

DIRECTION_EPS = 1e-12
SUM_TOL = 1e-9


@dataclass(frozen=True)
class GridSpec:
    height: int = 64
    width: int = 64

    def __post_init__(self):
        if int(self.height) != self.height or int(self.width) != self.width:
            raise UsageError("grid dimensions must be integers")
        if self.height < 2 or self.width < 2:
            raise UsageError(f"grid must be at least 2x2, got {self.height}x{self.width}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @cached_property
    def thetas(self) -> np.ndarray:
        i = np.arange(self.height)
        return _readonly((2 * i + 1) * np.pi / (2 * self.height))

    @cached_property
    def phis(self) -> np.ndarray:
        return _readonly(2 * np.pi * np.arange(self.width) / self.width)

    @cached_property
    def sin_theta(self) -> np.ndarray:
        """Column of sin(theta_i), shape (H, 1), broadcastable over a grid."""
        return _readonly(np.sin(self.thetas)[:, None])

    @cached_property
    def directions(self) -> np.ndarray:
        """Unit vectors rho(theta_i, phi_j), shape (H, W, 3)."""
        st = np.sin(self.thetas)[:, None]
        ct = np.cos(self.thetas)[:, None]
        cp = np.cos(self.phis)[None, :]
        sp = np.sin(self.phis)[None, :]
        rho = np.stack(np.broadcast_arrays(st * cp, st * sp, ct * np.ones_like(cp)), axis=-1)
        return _readonly(rho)

    @cached_property
    def weighted_directions(self) -> np.ndarray:
        """rho_ij * sin(theta_i), the kernel of the discrete expectation."""
        return _readonly(self.directions * self.sin_theta[..., None])


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=float)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class RawGrid:
    """Unnormalized grid values u(theta_i, phi_j)."""

    spec: GridSpec
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.shape != self.spec.shape:
            raise UsageError(f"raw grid shape {v.shape} does not match {self.spec.shape}")
        if not np.all(np.isfinite(v)):
            raise UsageError("raw grid contains non-finite values")
        object.__setattr__(self, "values", _readonly(v))


@dataclass(frozen=True)
class SphericalDistribution:
    """Non-negative grid summing to one under the sin(theta) measure."""

    spec: GridSpec
    probs: np.ndarray

    def __post_init__(self):
        p = np.array(self.probs, dtype=float)
        if p.shape != self.spec.shape:
            raise UsageError(f"probability grid shape {p.shape} does not match {self.spec.shape}")
        if not np.all(np.isfinite(p)) or np.any(p < 0):
            raise UsageError("probabilities must be finite and non-negative")
        total = float(np.sum(p * self.spec.sin_theta))
        if abs(total - 1.0) > SUM_TOL:
            raise UsageError(f"probabilities sum to {total!r} under the sin measure, expected 1")
        object.__setattr__(self, "probs", _readonly(p))

    @classmethod
    def from_weights(cls, spec: GridSpec, weights: np.ndarray) -> SphericalDistribution:
        """Normalize arbitrary non-negative cell weights."""
        w = np.asarray(weights, dtype=float)
        z = float(np.sum(w * spec.sin_theta))
        if not z > 0:
            raise UsageError("weights have zero total mass")
        return cls(spec, w / z)

    @classmethod
    def uniform(cls, spec: GridSpec) -> SphericalDistribution:
        return cls.from_weights(spec, np.ones(spec.shape))

    # -- serialization ------------------------------------------------------

    def to_bytes(self) -> tuple[dict, bytes]:
        """JSON header and little-endian float32 payload (row-major, H then W)."""
        header = {"h": self.spec.height, "w": self.spec.width}
        return header, self.probs.astype("<f4").tobytes(order="C")

    @classmethod
    def from_bytes(cls, header: dict, payload: bytes) -> SphericalDistribution:
        spec = GridSpec(int(header["h"]), int(header["w"]))
        data = np.frombuffer(payload, dtype="<f4")
        if data.size != spec.height * spec.width:
            raise UsageError(f"payload holds {data.size} floats, header says {spec.height}x{spec.width}")
        # float32 storage loses ~1e-7 relative; renormalize on the way back in.
        return cls.from_weights(spec, data.reshape(spec.shape).astype(float))

    def save(self, path: str | Path) -> None:
        path = Path(path)
        header, payload = self.to_bytes()
        path.write_bytes(payload)
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(header))

    @classmethod
    def load(cls, path: str | Path) -> SphericalDistribution:
        path = Path(path)
        header = json.loads(path.with_suffix(path.suffix + ".json").read_text())
        return cls.from_bytes(header, path.read_bytes())


def cell_direction(spec: GridSpec, i: int, j: int) -> np.ndarray:
    if not (0 <= i < spec.height and 0 <= j < spec.width):
        raise UsageError(f"cell ({i}, {j}) outside {spec.height}x{spec.width} grid")
    return spec.directions[i, j].copy()


def activate(values: np.ndarray, activation: Activation = "softplus") -> tuple[np.ndarray, np.ndarray]:
    """Return f(u) and f'(u) for the chosen activation.

    The exp branch subtracts the per-grid maximum first. That rescales every
    f value by the same factor, which the normalization cancels, so f' = f is
    still the right derivative for the normalized probabilities.
    """
    u = np.asarray(values, dtype=float)
    if activation == "softplus":
        # softplus and sigmoid share exp(-|u|), which never overflows.
        e = np.exp(-np.abs(u))
        f = np.maximum(u, 0.0) + np.log1p(e)
        df = np.where(u >= 0, 1.0, e) / (1.0 + e)
        return f, df
    if activation == "exp":
        shift = np.max(u, axis=(-2, -1), keepdims=True)
        f = np.exp(u - shift)
        return f, f
    raise UsageError(f"unknown activation {activation!r}")


def normalize_values(values: np.ndarray, spec: GridSpec, activation: Activation = "softplus") -> np.ndarray:
    """Array version of :func:`normalize`; accepts a leading batch of grids."""
    f, _ = activate(values, activation)
    z = np.sum(f * spec.sin_theta, axis=(-2, -1), keepdims=True)
    return f / z


def normalize(raw: RawGrid, activation: Activation = "softplus") -> SphericalDistribution:
    return SphericalDistribution(raw.spec, normalize_values(raw.values, raw.spec, activation))


def expectation_values(probs: np.ndarray, spec: GridSpec) -> np.ndarray:
    """sum_ij rho_ij P_ij sin(theta_i); works on (..., H, W) input."""
    p = np.asarray(probs, dtype=float)
    flat = p.reshape(*p.shape[:-2], -1)
    return flat @ spec.weighted_directions.reshape(-1, 3)


def expectation(dist: SphericalDistribution) -> np.ndarray:
    return expectation_values(dist.probs, dist.spec)


def normalize_direction(v: np.ndarray, eps: float = DIRECTION_EPS) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    n = float(np.linalg.norm(v))
    if not n > eps:
        raise DegenerateDirection(f"vector norm {n:.3g} is below {eps:g}; distribution too spread")
    return v / n


def vmf_weights(spec: GridSpec, mean: np.ndarray, kappa: float) -> np.ndarray:
    """Unnormalized vMF density exp(kappa (mu . rho - 1)) on the grid cells."""
    if not kappa > 0:
        raise UsageError(f"kappa must be positive, got {kappa}")
    mu = normalize_direction(mean)
    return np.exp(kappa * (spec.directions @ mu - 1.0))


def vmf_target(spec: GridSpec, mean: np.ndarray, kappa: float) -> SphericalDistribution:
    """vMF distribution normalized under the discrete grid measure."""
    return SphericalDistribution.from_weights(spec, vmf_weights(spec, mean, kappa))


def inverse_softplus(y: np.ndarray) -> np.ndarray:
    """u with softplus(u) = y, for y > 0."""
    y = np.asarray(y, dtype=float)
    if np.any(y <= 0):
        raise UsageError("inverse softplus needs strictly positive input")
    return y + np.log(-np.expm1(-y))


def spherical_pad(grid: np.ndarray, pad: int) -> np.ndarray:
    """Pad an equirectangular grid so borders see their true sphere neighbours.

    Columns wrap around in azimuth. Rows beyond a pole come back down the
    other side of it: padded row -k reads row k-1, padded row H-1+k reads row
    H-k, and both read the column half a turn away. Corners apply the
    column wrap first and then the pole shift. Extra trailing axes (channels)
    are carried along untouched.
    """
    g = np.asarray(grid)
    if g.ndim < 2:
        raise UsageError("grid must be at least 2-D")
    h, w = g.shape[:2]
    if int(pad) != pad or pad < 1:
        raise UsageError(f"pad must be a positive integer, got {pad}")
    if w % 2:
        raise UsageError(f"spherical padding needs an even width, got {w}")
    if not (pad < w / 2 and pad <= h):
        raise UsageError(f"pad={pad} too large for a {h}x{w} grid")

    rows = np.arange(-pad, h + pad)
    cols = np.arange(-pad, w + pad)
    over_pole = (rows < 0) | (rows >= h)
    src_rows = np.where(rows < 0, -rows - 1, np.where(rows >= h, 2 * h - 1 - rows, rows))
    shift = np.where(over_pole, w // 2, 0)
    src_cols = (cols[None, :] + shift[:, None]) % w
    return g[src_rows[:, None], src_cols]


def crop_padding(padded: np.ndarray, pad: int) -> np.ndarray:
    return np.asarray(padded)[pad:-pad, pad:-pad]
