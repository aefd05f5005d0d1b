"""Exception types shared across modules."""


class DirPoseError(Exception):
    """Base class for all package errors."""


class UsageError(DirPoseError, ValueError):
    """Invalid argument, shape mismatch or out-of-range parameter."""


class DegenerateDirection(DirPoseError, ArithmeticError):
    """A vector is too short to define a direction."""


class DegenerateFrame(DirPoseError, ArithmeticError):
    """Two vectors are (nearly) parallel, so no frame can be built."""


class SingularInput(DirPoseError, ArithmeticError):
    """Matrix is rank deficient."""


class AmbiguousHalfRotation(DirPoseError, ArithmeticError):
    """Rotation angle too close to pi for a unique half rotation."""


class DivergedFit(DirPoseError, ArithmeticError):
    """Optimization produced a non-finite loss."""

    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"loss became non-finite at step {step}")
