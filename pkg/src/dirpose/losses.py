"""Direction, distribution and spread losses with analytic gradients.

For a raw grid u the forward pass is

    f = act(u),  P = f / sum(f sin),  E = sum(rho P sin)
    L = -cos(E, E*) + lambda_d * mean((P - P*)^2 sin) + lambda_sigma * (1 - |E|)

and the backward pass runs the chain rule through the same three steps:

    dL/dP_ij = (dL/dE . rho_ij) sin_i + 2 lambda_d (P - P*)_ij sin_i / (HW)
    dL/df_ij = (dL/dP_ij - sin_i sum(dL/dP * P)) / Z
    dL/du    = dL/df * act'(u)
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Literal, Sequence

import numpy as np

from dirpose.errors import DegenerateDirection, UsageError
from dirpose.sphere_grid import (
    DIRECTION_EPS,
    Activation,
    GridSpec,
    RawGrid,
    SphericalDistribution,
    activate,
    expectation_values,
)

# Below this expectation norm the direction is meaningless.
GUARD_EPS = 1e-8

DegeneratePolicy = Literal["raise", "skip"]


@dataclass(frozen=True)
class LossWeights:
    lambda_d: float = 8e7
    lambda_sigma: float = 0.1

    def __post_init__(self):
        for name in ("lambda_d", "lambda_sigma"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise UsageError(f"{name} must be finite and non-negative, got {v}")


@dataclass(frozen=True)
class LossBreakdown:
    direction: float
    distribution: float
    spread: float
    total: float

    def to_dict(self) -> dict:
        return asdict(self)


def direction_loss(p1: np.ndarray, p2: np.ndarray) -> float:
    """Negative cosine similarity."""
    p1 = np.asarray(p1, dtype=float)
    p2 = np.asarray(p2, dtype=float)
    n1, n2 = np.linalg.norm(p1), np.linalg.norm(p2)
    if not (n1 > DIRECTION_EPS and n2 > DIRECTION_EPS):
        raise DegenerateDirection("direction loss needs two nonzero vectors")
    return float(np.clip(-(p1 @ p2) / (n1 * n2), -1.0, 1.0))


def distribution_loss(p1: SphericalDistribution, p2: SphericalDistribution) -> float:
    if p1.spec != p2.spec:
        raise UsageError(f"grid mismatch: {p1.spec} vs {p2.spec}")
    spec = p1.spec
    return float(np.sum((p1.probs - p2.probs) ** 2 * spec.sin_theta) / (spec.height * spec.width))


def spread_loss(p: np.ndarray) -> float:
    return float(1.0 - np.linalg.norm(p))


def _forward_backward(
    values: np.ndarray,
    target: np.ndarray,
    spec: GridSpec,
    weights: LossWeights,
    activation: Activation,
    degenerate: DegeneratePolicy,
    need_grad: bool,
):
    """Batched loss over grids of shape (..., H, W).

    Returns per-grid (direction, distribution, spread) arrays and the gradient
    with respect to ``values`` (or None).
    """
    sin = spec.sin_theta
    hw = spec.height * spec.width
    f, df = activate(values, activation)
    z = np.sum(f * sin, axis=(-2, -1), keepdims=True)
    p = f / z
    e = expectation_values(p, spec)
    e_star = expectation_values(target, spec)

    n = np.linalg.norm(e, axis=-1)
    n_star = np.linalg.norm(e_star, axis=-1)
    if np.any(n_star <= GUARD_EPS):
        raise DegenerateDirection("target distribution has no defined direction")
    ok = n > GUARD_EPS
    if degenerate == "raise" and not np.all(ok):
        raise DegenerateDirection(f"predicted expectation norm {np.min(n):.3g} is degenerate")

    a = e_star / n_star[..., None]
    n_safe = np.where(ok, n, 1.0)
    dot = np.sum(e * a, axis=-1)
    direction = np.where(ok, -dot / n_safe, 0.0)
    spread = np.where(ok, 1.0 - n, 1.0)
    diff = p - target
    distribution = np.sum(diff * diff * sin, axis=(-2, -1)) / hw

    if not need_grad:
        return direction, distribution, spread, None

    # dL/dE; both terms vanish when the guard trips.
    d_e = -(a / n_safe[..., None] - (dot / n_safe**3)[..., None] * e)
    d_e = d_e - weights.lambda_sigma * e / n_safe[..., None]
    d_e = np.where(ok[..., None], d_e, 0.0)

    g = (d_e @ spec.weighted_directions.reshape(-1, 3).T).reshape(*d_e.shape[:-1], *spec.shape)
    g = g + (2.0 * weights.lambda_d / hw) * diff * sin
    gp = np.sum(g * p, axis=(-2, -1), keepdims=True)
    grad = (g - sin * gp) / z * df
    return direction, distribution, spread, grad


def _check_target(raw: RawGrid, target: SphericalDistribution) -> None:
    if raw.spec != target.spec:
        raise UsageError(f"grid mismatch: {raw.spec} vs {target.spec}")


def _breakdown(direction, distribution, spread, weights: LossWeights) -> LossBreakdown:
    d, dist, s = float(direction), float(distribution), float(spread)
    total = d + weights.lambda_d * dist + weights.lambda_sigma * s
    return LossBreakdown(direction=d, distribution=dist, spread=s, total=total)


def combined_loss(
    raw: RawGrid,
    target: SphericalDistribution,
    weights: LossWeights = LossWeights(),
    activation: Activation = "softplus",
    degenerate: DegeneratePolicy = "raise",
) -> LossBreakdown:
    """Full single-direction loss.

    ``degenerate="raise"`` refuses predictions whose expectation is (nearly)
    zero; ``"skip"`` drops the direction term there and pins spread at 1.
    """
    _check_target(raw, target)
    d, dist, s, _ = _forward_backward(
        raw.values, target.probs, raw.spec, weights, activation, degenerate, need_grad=False
    )
    return _breakdown(d, dist, s, weights)


def combined_loss_grad(
    raw: RawGrid,
    target: SphericalDistribution,
    weights: LossWeights = LossWeights(),
    activation: Activation = "softplus",
    degenerate: DegeneratePolicy = "raise",
) -> np.ndarray:
    """d total / d raw, shape (H, W)."""
    _check_target(raw, target)
    *_, grad = _forward_backward(
        raw.values, target.probs, raw.spec, weights, activation, degenerate, need_grad=True
    )
    return grad


def batch_loss_and_grad(
    values: np.ndarray,
    targets: np.ndarray,
    spec: GridSpec,
    weights: LossWeights = LossWeights(),
    activation: Activation = "softplus",
    degenerate: DegeneratePolicy = "skip",
) -> tuple[list[LossBreakdown], np.ndarray]:
    """Loss breakdowns and gradients for a stack of (K, H, W) grids."""
    values = np.asarray(values, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if values.shape != targets.shape or values.shape[-2:] != spec.shape:
        raise UsageError(f"shape mismatch: {values.shape} vs {targets.shape} on {spec.shape}")
    d, dist, s, grad = _forward_backward(values, targets, spec, weights, activation, degenerate, True)
    parts = [_breakdown(*x, weights) for x in zip(np.atleast_1d(d), np.atleast_1d(dist), np.atleast_1d(s))]
    return parts, grad


def rotation_loss(
    grids: Sequence[RawGrid],
    targets: Sequence[SphericalDistribution],
    weights: LossWeights = LossWeights(),
    activation: Activation = "softplus",
) -> float:
    """Sum of per-direction totals over paired (grid, target) lists."""
    if len(grids) != len(targets):
        raise UsageError("need one target per grid")
    return float(sum(combined_loss(g, t, weights, activation).total for g, t in zip(grids, targets)))
