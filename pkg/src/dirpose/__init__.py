"""Directional relative-pose toolkit.

Relative camera pose (R, t) is represented as a handful of unit directions,
each carried by a discrete probability distribution on an equirectangular
sphere grid. The package covers the grid math, SO(3) projections, losses
with analytic gradients, a synthetic wide-baseline pair generator and an
evaluation harness for two-stage (rotate, derotate, translate) pipelines.
"""

from dirpose.errors import (
    AmbiguousHalfRotation,
    DegenerateDirection,
    DegenerateFrame,
    DirPoseError,
    DivergedFit,
    SingularInput,
    UsageError,
)

__version__ = "0.1.0"

__all__ = [
    "AmbiguousHalfRotation",
    "DegenerateDirection",
    "DegenerateFrame",
    "DirPoseError",
    "DivergedFit",
    "SingularInput",
    "UsageError",
    "__version__",
]
