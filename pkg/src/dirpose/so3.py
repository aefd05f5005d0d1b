"""Rotations: projections onto SO(3), geodesics, half rotations, look-at frames.

Rotations are plain 3x3 float arrays. Quaternions are (w, x, y, z) with the
scalar first.
"""

from __future__ import annotations

import numpy as np

from dirpose.errors import AmbiguousHalfRotation, DegenerateFrame, SingularInput, UsageError

ORTHO_TOL = 1e-9
HALF_ROTATION_LIMIT = np.pi - 1e-6


def is_rotation(m: np.ndarray, tol: float = ORTHO_TOL) -> bool:
    m = np.asarray(m, dtype=float)
    if m.shape != (3, 3) or not np.all(np.isfinite(m)):
        return False
    return bool(np.max(np.abs(m.T @ m - np.eye(3))) <= tol and abs(np.linalg.det(m) - 1.0) <= tol)


def check_rotation(m: np.ndarray, tol: float = ORTHO_TOL) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    if not is_rotation(m, tol):
        raise UsageError("matrix is not a rotation (needs R^T R = I and det R = +1)")
    return m


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = np.asarray(v, dtype=float)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def axis_angle(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rodrigues formula; ``axis`` need not be unit length."""
    a = np.asarray(axis, dtype=float)
    n = np.linalg.norm(a)
    if n == 0:
        raise UsageError("rotation axis must be nonzero")
    k = skew(a / n)
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


def rot_x(angle: float) -> np.ndarray:
    return axis_angle([1.0, 0.0, 0.0], angle)


def rot_y(angle: float) -> np.ndarray:
    return axis_angle([0.0, 1.0, 0.0], angle)


def rot_z(angle: float) -> np.ndarray:
    return axis_angle([0.0, 0.0, 1.0], angle)


# -- quaternions ---------------------------------------------------------------


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(m: np.ndarray) -> np.ndarray:
    """Shepperd's method, returning the representative with w >= 0."""
    m = np.asarray(m, dtype=float)
    tr = np.trace(m)
    diag = np.diag(m)
    k = int(np.argmax([tr, *diag]))
    if k == 0:
        s = 2.0 * np.sqrt(1.0 + tr)
        q = np.array([0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s])
    elif k == 1:
        s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
        q = np.array([(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s])
    elif k == 2:
        s = 2.0 * np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
        q = np.array([(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s])
    else:
        s = 2.0 * np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
        q = np.array([(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s])
    q /= np.linalg.norm(q)
    return q if q[0] >= 0 else -q


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    w1, x1, y1, z1 = a
    w2, x2, y2, z2 = b
    return np.array(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ]
    )


def random_rotation(rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Haar-uniform rotations from normalized 4-D Gaussians."""
    if size is None:
        return quat_to_matrix(rng.standard_normal(4))
    return np.stack([quat_to_matrix(q) for q in rng.standard_normal((size, 4))])


# -- projections onto SO(3) ------------------------------------------------------


def procrustes_project(m: np.ndarray, rank_tol: float = 1e-9) -> np.ndarray:
    """Closest rotation to ``m`` in Frobenius norm: U diag(1, 1, det(UV^T)) V^T."""
    m = np.asarray(m, dtype=float)
    if m.shape != (3, 3):
        raise UsageError(f"expected a 3x3 matrix, got shape {m.shape}")
    u, s, vt = np.linalg.svd(m)
    if not s[-1] > rank_tol:
        raise SingularInput(f"smallest singular value {s[-1]:.3g} below {rank_tol:g}")
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def gram_schmidt_project(vx: np.ndarray, vy: np.ndarray) -> np.ndarray:
    """Rotation whose first column is vx and whose second lies in span(vx, vy)."""
    a = np.asarray(vx, dtype=float)
    b = np.asarray(vy, dtype=float)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise DegenerateFrame("zero-length input vector")
    c1 = a / na
    if abs(float(c1 @ b) / nb) >= 1.0 - 1e-9:
        raise DegenerateFrame("input vectors are parallel")
    c2 = b - (b @ c1) * c1
    c2 /= np.linalg.norm(c2)
    c3 = np.cross(c1, c2)
    return np.column_stack([c1, c2, c3])


# -- metrics and half rotations ------------------------------------------------------


def rotation_angle(m: np.ndarray) -> float:
    """Angle of a rotation in [0, pi].

    Equal to arccos((tr R - 1) / 2) but evaluated as atan2(sin, cos) so small
    angles keep full precision.
    """
    m = np.asarray(m, dtype=float)
    cos = (np.trace(m) - 1.0) / 2.0
    w = np.array([m[2, 1] - m[1, 2], m[0, 2] - m[2, 0], m[1, 0] - m[0, 1]])
    sin = np.linalg.norm(w) / 2.0
    return float(np.arctan2(sin, np.clip(cos, -1.0, 1.0)))


def geodesic_distance(r1: np.ndarray, r2: np.ndarray) -> float:
    return rotation_angle(np.asarray(r1, dtype=float).T @ np.asarray(r2, dtype=float))


def half_rotation(m: np.ndarray) -> np.ndarray:
    """Rotation r about the same axis with half the angle, so r @ r = m."""
    m = check_rotation(m)
    if rotation_angle(m) >= HALF_ROTATION_LIMIT:
        raise AmbiguousHalfRotation("rotation angle too close to pi; axis sign is ambiguous")
    # q = (cos a/2, sin a/2 n) with w >= 0; (1 + w, v) normalized halves the angle.
    q = matrix_to_quat(m)
    q[0] += 1.0
    return quat_to_matrix(q)


def log_map(m: np.ndarray) -> np.ndarray:
    """Axis-angle vector (axis * angle) of a rotation with angle < pi."""
    q = matrix_to_quat(np.asarray(m, dtype=float))
    v = q[1:]
    s = np.linalg.norm(v)
    if s == 0:
        return np.zeros(3)
    return v / s * 2.0 * np.arctan2(s, q[0])


# -- sampling ------------------------------------------------------------------------


def orthonormal_complement(v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Two unit vectors completing unit ``v`` to a right-handed basis."""
    v = np.asarray(v, dtype=float)
    helper = np.eye(3)[int(np.argmin(np.abs(v)))]
    e1 = np.cross(v, helper)
    e1 /= np.linalg.norm(e1)
    return e1, np.cross(v, e1)


def sample_cap(center: np.ndarray, half_angle: float, rng: np.random.Generator) -> np.ndarray:
    """Area-uniform unit vector within ``half_angle`` of unit ``center``."""
    c = np.asarray(center, dtype=float)
    c = c / np.linalg.norm(c)
    cos_t = 1.0 - rng.random() * (1.0 - np.cos(half_angle))
    sin_t = np.sqrt(max(0.0, 1.0 - cos_t * cos_t))
    phi = 2.0 * np.pi * rng.random()
    e1, e2 = orthonormal_complement(c)
    return cos_t * c + sin_t * (np.cos(phi) * e1 + np.sin(phi) * e2)


def perturb_rotation(m: np.ndarray, max_angle: float, rng: np.random.Generator) -> np.ndarray:
    """Jitter each column within a cone of ``max_angle`` and re-project onto SO(3)."""
    m = check_rotation(m)
    if not 0 <= max_angle < np.pi / 2:
        raise UsageError(f"max_angle must lie in [0, pi/2), got {max_angle}")
    if max_angle == 0:
        return m.copy()
    cols = [sample_cap(m[:, k], max_angle, rng) for k in range(3)]
    return procrustes_project(np.column_stack(cols))


# -- cameras -----------------------------------------------------------------------------


def from_lookat(look: np.ndarray, up: np.ndarray) -> np.ndarray:
    """Camera-to-world orientation for a camera looking along ``look``.

    The camera looks down its local -Z axis with +Y as image up and +X as
    image right, so the columns are (right, up', -look).
    """
    f = np.asarray(look, dtype=float)
    u = np.asarray(up, dtype=float)
    nf, nu = np.linalg.norm(f), np.linalg.norm(u)
    if nf == 0 or nu == 0:
        raise DegenerateFrame("look and up must be nonzero")
    f = f / nf
    right = np.cross(f, u / nu)
    n = np.linalg.norm(right)
    if n < 1e-9:
        raise DegenerateFrame("look direction is parallel to the up vector")
    right /= n
    true_up = np.cross(right, f)
    return np.column_stack([right, true_up, -f])
