"""Camera poses, pinhole intrinsics, pose distance and pose-path interpolation.

Poses are world-to-camera: ``x_cam = R @ x_world + t`` with ``R`` stored as a
unit quaternion ``(w, x, y, z)``. Pixel coordinates place the centre of pixel
``(row i, col j)`` at ``(u, v) = (j, i)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import InvalidInputError

UNIT_TOL = 1e-9
NEAR_PLANE = 0.01


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    arr.setflags(write=False)
    return arr


def quat_to_rotmat(q) -> np.ndarray:
    """Rotation matrix of a unit quaternion ``(w, x, y, z)``."""
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quat_multiply(a, b) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * angle
    return np.concatenate([[math.cos(half)], math.sin(half) * axis])


def _check_unit(q: np.ndarray, what: str = "quaternion") -> None:
    n = float(np.linalg.norm(q))
    if not np.all(np.isfinite(q)) or abs(n - 1.0) > UNIT_TOL:
        raise InvalidInputError(f"{what} is not unit-norm (|q| = {n!r})")


@dataclass(frozen=True, eq=False)
class CameraPose:
    """World-to-camera rigid transform; immutable."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        q = _frozen(self.rotation)
        t = _frozen(self.translation)
        if q.shape != (4,) or t.shape != (3,):
            raise InvalidInputError("pose needs a 4-vector quaternion and 3-vector translation")
        if not np.all(np.isfinite(t)):
            raise InvalidInputError("pose translation is not finite")
        _check_unit(q, "pose rotation")
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> CameraPose:
        return cls(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @classmethod
    def normalized(cls, rotation, translation) -> CameraPose:
        """Build a pose, rescaling ``rotation`` to unit norm first."""
        q = np.asarray(rotation, dtype=np.float64)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n == 0.0:
            raise InvalidInputError("cannot normalize a zero or non-finite quaternion")
        return cls(q / n, translation)

    @classmethod
    def from_matrix(cls, rotation_matrix, translation) -> CameraPose:
        return cls.normalized(rotmat_to_quat(rotation_matrix), translation)

    @property
    def rotation_matrix(self) -> np.ndarray:
        return quat_to_rotmat(self.rotation)

    @property
    def center(self) -> np.ndarray:
        """Camera centre in world coordinates."""
        return -self.rotation_matrix.T @ self.translation

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation_matrix
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> CameraPose:
        q = self.rotation * np.array([1.0, -1.0, -1.0, -1.0])
        return CameraPose(q, -quat_to_rotmat(q) @ self.translation)

    def compose(self, other: CameraPose) -> CameraPose:
        """``self ∘ other``: apply ``other`` first, then ``self``."""
        q = quat_multiply(self.rotation, other.rotation)
        t = self.rotation_matrix @ other.translation + self.translation
        return CameraPose.normalized(q, t)

    def transform(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation_matrix.T + self.translation

    def __eq__(self, other):
        if not isinstance(other, CameraPose):
            return NotImplemented
        return bool(
            np.array_equal(self.rotation, other.rotation)
            and np.array_equal(self.translation, other.translation)
        )

    def __hash__(self):
        return hash((self.rotation.tobytes(), self.translation.tobytes()))

    def __repr__(self):
        return f"CameraPose(rotation={self.rotation.tolist()}, translation={self.translation.tolist()})"


def rotmat_to_quat(m) -> np.ndarray:
    """Quaternion ``(w, x, y, z)`` with ``w >= 0`` for a rotation matrix (Shepperd's method)."""
    m = np.asarray(m, dtype=np.float64)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0:
        s = 2.0 * math.sqrt(tr + 1.0)
        q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = 2.0 * math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
        q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
    elif m[1, 1] > m[2, 2]:
        s = 2.0 * math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
        q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
    else:
        s = 2.0 * math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
        q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def look_at(eye, target, up=(0.0, -1.0, 0.0)) -> CameraPose:
    """World-to-camera pose for a camera at ``eye`` with +z pointing at ``target``.

    Uses the OpenCV/COLMAP axis convention (x right, y down, z forward).
    """
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    rot = np.stack([right, down, forward])  # rows: camera axes in world frame
    return CameraPose.from_matrix(rot, -rot @ eye)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        for name in ("fx", "fy", "cx", "cy"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if int(self.width) != self.width or int(self.height) != self.height:
            raise InvalidInputError("image width/height must be integers")
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        if self.width <= 0 or self.height <= 0:
            raise InvalidInputError(f"image size must be positive, got {self.width}x{self.height}")
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidInputError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise InvalidInputError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image"
            )

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def scaled(self, factor: int) -> CameraIntrinsics:
        """Intrinsics after box-downsampling the image by an integer ``factor``."""
        if factor < 1:
            raise InvalidInputError("downscale factor must be >= 1")
        return CameraIntrinsics(
            self.fx / factor,
            self.fy / factor,
            (self.cx + 0.5) / factor - 0.5,
            (self.cy + 0.5) / factor - 0.5,
            self.width // factor,
            self.height // factor,
        )


def rotation_angle(qa, qb) -> float:
    """Geodesic angle in radians between two unit quaternions, sign-invariant."""
    dot = abs(float(np.dot(qa, qb)))
    return 2.0 * math.acos(min(1.0, dot))


def pose_distance(a: CameraPose, b: CameraPose, lambda_tr: float = 1.0, lambda_rot: float = 10.0) -> float:
    """Weighted sum of translation distance and quaternion geodesic angle."""
    _check_unit(np.asarray(a.rotation), "first pose rotation")
    _check_unit(np.asarray(b.rotation), "second pose rotation")
    tr = float(np.linalg.norm(np.asarray(a.translation) - np.asarray(b.translation)))
    return lambda_tr * tr + lambda_rot * rotation_angle(a.rotation, b.rotation)


def slerp(q0, q1, t: float) -> np.ndarray:
    """Spherical interpolation along the shorter arc, renormalized."""
    q0 = np.asarray(q0, dtype=np.float64)
    q1 = np.asarray(q1, dtype=np.float64)
    dot = float(np.dot(q0, q1))
    if dot < 0.0:
        q1 = -q1
        dot = -dot
    dot = min(dot, 1.0)
    if dot > 0.9995:
        q = q0 + t * (q1 - q0)
    else:
        theta = math.acos(dot)
        s = math.sin(theta)
        q = (math.sin((1.0 - t) * theta) / s) * q0 + (math.sin(t * theta) / s) * q1
    return q / np.linalg.norm(q)


def interpolate_poses(src: CameraPose, tgt: CameraPose, K: int) -> list[CameraPose]:
    """``K`` poses strictly between ``src`` and ``tgt`` at ``t_k = k / (K + 1)``."""
    if int(K) != K or K < 1:
        raise InvalidInputError(f"K must be a positive integer, got {K!r}")
    out = []
    for k in range(1, K + 1):
        t = k / (K + 1)
        q = slerp(src.rotation, tgt.rotation, t)
        trans = (1.0 - t) * src.translation + t * tgt.translation
        out.append(CameraPose(q, trans))
    return out


class Projection(NamedTuple):
    u: float
    v: float
    depth: float
    in_front: bool


def project_point(x_world, pose: CameraPose, intr: CameraIntrinsics, near: float = NEAR_PLANE) -> Projection:
    """Pinhole projection. Points at or behind ``near`` come back with ``in_front=False``
    and NaN pixel coordinates."""
    xc = pose.rotation_matrix @ np.asarray(x_world, dtype=np.float64) + pose.translation
    z = float(xc[2])
    if z <= near:
        return Projection(math.nan, math.nan, z, False)
    return Projection(intr.fx * xc[0] / z + intr.cx, intr.fy * xc[1] / z + intr.cy, z, True)
