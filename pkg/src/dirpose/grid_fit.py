"""Fit raw sphere grids to vMF targets by first-order descent.

This is the desk-scale stand-in for a learned decoder: the raw grid cells
are the free parameters and the loss is the full direction + distribution +
spread objective.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np

from dirpose.errors import DivergedFit, UsageError
from dirpose.losses import LossBreakdown, LossWeights, batch_loss_and_grad
from dirpose.so3 import geodesic_distance, gram_schmidt_project, procrustes_project
from dirpose.sphere_grid import (
    Activation,
    GridSpec,
    expectation_values,
    normalize_direction,
    normalize_values,
    vmf_target,
)

Variant = Literal["svd9d", "gs6d"]


@dataclass(frozen=True)
class FitConfig:
    learning_rate: float = 0.1
    steps: int = 2000
    activation: Activation = "softplus"
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    init_scale: float = 1e-3
    optimizer: Literal["adam", "gd"] = "adam"
    beta1: float = 0.9
    beta2: float = 0.99
    adam_eps: float = 1e-8

    def __post_init__(self):
        if int(self.steps) != self.steps or self.steps < 1:
            raise UsageError(f"steps must be a positive integer, got {self.steps}")
        if not (np.isfinite(self.learning_rate) and self.learning_rate > 0):
            raise UsageError(f"learning_rate must be positive and finite, got {self.learning_rate}")
        if not (np.isfinite(self.init_scale) and self.init_scale >= 0):
            raise UsageError(f"init_scale must be non-negative, got {self.init_scale}")
        if self.optimizer not in ("adam", "gd"):
            raise UsageError(f"unknown optimizer {self.optimizer!r}")
        if self.activation not in ("softplus", "exp"):
            raise UsageError(f"unknown activation {self.activation!r}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise UsageError("Adam betas must lie in [0, 1)")


@dataclass
class FitReport:
    final_direction: np.ndarray
    final_loss: LossBreakdown
    loss_trace: list[float]
    angular_error_deg: float
    # Rotation fits only: fitted directions as rows, per-direction errors and the projection.
    directions: np.ndarray | None = None
    direction_errors_deg: list[float] | None = None
    rotation: np.ndarray | None = None
    # Fitted probability grids, (K, H, W); kept for figures, not serialized.
    distributions: np.ndarray | None = None

    def to_dict(self) -> dict:
        out = {
            "final_direction": np.asarray(self.final_direction).tolist(),
            "final_loss": self.final_loss.to_dict(),
            "angular_error_deg": self.angular_error_deg,
            "steps": len(self.loss_trace),
        }
        if self.rotation is not None:
            out["rotation"] = np.asarray(self.rotation).ravel().tolist()
            out["directions"] = np.asarray(self.directions).tolist()
            out["direction_errors_deg"] = list(self.direction_errors_deg)
        return out

    def write_trace_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "total"])
            for k, v in enumerate(self.loss_trace):
                writer.writerow([k, repr(float(v))])


def _angle_deg(a: np.ndarray, b: np.ndarray) -> float:
    cos = float(np.dot(a, b))
    sin = float(np.linalg.norm(np.cross(a, b)))
    return float(np.degrees(np.arctan2(sin, cos)))


def fit_grids(targets: np.ndarray, spec: GridSpec, cfg: FitConfig) -> tuple[np.ndarray, list[float], list[LossBreakdown]]:
    """Descend on a stack of (K, H, W) raw grids, one per target.

    The loss of a stack is the sum of per-grid losses, so the grids evolve
    independently; stacking only batches the arithmetic.
    """
    targets = np.asarray(targets, dtype=float)
    rng = np.random.default_rng(cfg.seed)
    u = rng.uniform(-cfg.init_scale, cfg.init_scale, size=targets.shape) if cfg.init_scale > 0 else np.zeros(targets.shape)
    m = np.zeros_like(u)
    v = np.zeros_like(u)
    trace: list[float] = []
    parts: list[LossBreakdown] = []
    for step in range(cfg.steps):
        parts, grad = batch_loss_and_grad(u, targets, spec, cfg.weights, cfg.activation, degenerate="skip")
        total = sum(p.total for p in parts)
        if not np.isfinite(total) or not np.all(np.isfinite(grad)):
            raise DivergedFit(step)
        trace.append(total)
        if cfg.optimizer == "gd":
            u = u - cfg.learning_rate * grad
        else:
            m = cfg.beta1 * m + (1 - cfg.beta1) * grad
            v = cfg.beta2 * v + (1 - cfg.beta2) * grad * grad
            m_hat = m / (1 - cfg.beta1 ** (step + 1))
            v_hat = v / (1 - cfg.beta2 ** (step + 1))
            u = u - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
    # Report the loss of the grids actually returned, not the pre-update ones.
    parts, _ = batch_loss_and_grad(u, targets, spec, cfg.weights, cfg.activation, degenerate="skip")
    return u, trace, parts


def _fitted_directions(u: np.ndarray, spec: GridSpec, activation: Activation) -> np.ndarray:
    e = expectation_values(normalize_values(u, spec, activation), spec)
    return np.stack([normalize_direction(x) for x in np.atleast_2d(e)])


def fit_direction(target_dir: np.ndarray, kappa: float, spec: GridSpec, cfg: FitConfig = FitConfig()) -> FitReport:
    mu = normalize_direction(target_dir)
    target = vmf_target(spec, mu, kappa)
    u, trace, parts = fit_grids(target.probs[None], spec, cfg)
    d = _fitted_directions(u, spec, cfg.activation)[0]
    return FitReport(
        final_direction=d,
        final_loss=parts[0],
        loss_trace=trace,
        angular_error_deg=_angle_deg(d, mu),
        distributions=normalize_values(u, spec, cfg.activation),
    )


def fit_rotation(
    target_r: np.ndarray,
    kappa: float,
    spec: GridSpec,
    cfg: FitConfig = FitConfig(),
    variant: Variant = "svd9d",
) -> tuple[np.ndarray, FitReport]:
    """Fit one grid per rotation column and project the directions onto SO(3).

    ``svd9d`` fits all three columns and uses Procrustes; ``gs6d`` fits the
    first two and uses Gram-Schmidt.
    """
    target_r = np.asarray(target_r, dtype=float)
    if variant == "svd9d":
        k = 3
    elif variant == "gs6d":
        k = 2
    else:
        raise UsageError(f"unknown variant {variant!r}")
    targets = np.stack([vmf_target(spec, target_r[:, c], kappa).probs for c in range(k)])
    u, trace, parts = fit_grids(targets, spec, cfg)
    dirs = _fitted_directions(u, spec, cfg.activation)
    if variant == "svd9d":
        rot = procrustes_project(dirs.T)
    else:
        rot = gram_schmidt_project(dirs[0], dirs[1])
    total = LossBreakdown(
        direction=sum(p.direction for p in parts),
        distribution=sum(p.distribution for p in parts),
        spread=sum(p.spread for p in parts),
        total=sum(p.total for p in parts),
    )
    report = FitReport(
        final_direction=dirs[0],
        final_loss=total,
        loss_trace=trace,
        angular_error_deg=float(np.degrees(geodesic_distance(rot, target_r))),
        directions=dirs,
        direction_errors_deg=[_angle_deg(dirs[c], target_r[:, c]) for c in range(k)],
        rotation=rot,
        distributions=normalize_values(u, spec, cfg.activation),
    )
    return rot, report


def window_nonincreasing(trace: list[float], window: int = 50, tol: float = 0.0) -> bool:
    """True when the ``window``-step moving average never goes up by more than ``tol``."""
    t = np.asarray(trace, dtype=float)
    if t.size <= window:
        return True
    avg = np.convolve(t, np.ones(window) / window, mode="valid")
    return bool(np.all(np.diff(avg) <= tol))
