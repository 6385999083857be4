"""Rigid (SE3) and similarity (Sim3) transforms with quaternion rotations.

Rotations are stored as unit quaternions and converted to 3x3 matrices only
inside the exponential/logarithm maps and point application.  All values are
immutable after construction; operations are pure functions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# Below this rotation angle the closed-form exp/log coefficients are replaced
# by their second-order series (the closed forms divide by theta^2/theta^3).
_SERIES_ANGLE = 1e-4

# se3_log rejects rotations closer to pi than this: the axis is ill-defined.
_MAX_LOG_ANGLE = math.pi - 1e-6


class DegenerateRotationError(ValueError):
    """Rotation angle too close to pi for a stable logarithm."""


def _skew(v: np.ndarray) -> np.ndarray:
    return np.array(
        [
            [0.0, -v[2], v[1]],
            [v[2], 0.0, -v[0]],
            [-v[1], v[0], 0.0],
        ]
    )


@dataclass(frozen=True)
class Quaternion:
    """Unit quaternion (w, x, y, z); hemisphere convention w >= 0 after normalize."""

    w: float
    x: float
    y: float
    z: float

    def norm(self) -> float:
        return math.sqrt(self.w**2 + self.x**2 + self.y**2 + self.z**2)

    def normalized(self) -> "Quaternion":
        n2 = self.w**2 + self.x**2 + self.y**2 + self.z**2
        if n2 < 1e-24:
            raise ValueError("cannot normalize a near-zero quaternion")
        if abs(n2 - 1.0) < 2e-8:
            # Already unit to printing precision: dividing would perturb the
            # 9th significant digit and break text round trips.  Only the
            # hemisphere flip (exact in floating point) is applied.
            s = -1.0 if self.w < 0.0 else 1.0
        else:
            s = -1.0 / math.sqrt(n2) if self.w < 0.0 else 1.0 / math.sqrt(n2)
        if s == 1.0:
            return self
        return Quaternion(self.w * s, self.x * s, self.y * s, self.z * s)

    def conjugate(self) -> "Quaternion":
        return Quaternion(self.w, -self.x, -self.y, -self.z)

    def __mul__(self, o: "Quaternion") -> "Quaternion":
        # Hamilton product.
        return Quaternion(
            self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z,
            self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y,
            self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x,
            self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w,
        )

    def to_matrix(self) -> np.ndarray:
        w, x, y, z = self.w, self.x, self.y, self.z
        # Scaling by 2/|q|^2 keeps the matrix orthogonal under tiny norm drift.
        s = 2.0 / (w * w + x * x + y * y + z * z)
        xx, yy, zz = s * x * x, s * y * y, s * z * z
        wx, wy, wz = s * w * x, s * w * y, s * w * z
        xy, xz, yz = s * x * y, s * x * z, s * y * z
        return np.array(
            [
                [1.0 - (yy + zz), xy - wz, xz + wy],
                [xy + wz, 1.0 - (xx + zz), yz - wx],
                [xz - wy, yz + wx, 1.0 - (xx + yy)],
            ]
        )

    @staticmethod
    def from_matrix(m: np.ndarray) -> "Quaternion":
        # Shepperd's method: pick the largest diagonal combination for stability.
        m = np.asarray(m, dtype=float)
        t = np.trace(m)
        if t > 0.0:
            s = math.sqrt(t + 1.0) * 2.0
            q = (0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s)
        elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
            s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
            q = ((m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s)
        elif m[1, 1] > m[2, 2]:
            s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
            q = ((m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s)
        else:
            s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
            q = ((m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s)
        return Quaternion(*q).normalized()

    @staticmethod
    def from_rotvec(w: np.ndarray) -> "Quaternion":
        w = np.asarray(w, dtype=float)
        theta = float(np.linalg.norm(w))
        half = 0.5 * theta
        if theta < _SERIES_ANGLE:
            # sin(theta/2)/theta = 1/2 - theta^2/48 + O(theta^4)
            s = 0.5 - theta * theta / 48.0
        else:
            s = math.sin(half) / theta
        return Quaternion(math.cos(half), s * w[0], s * w[1], s * w[2]).normalized()

    def to_rotvec(self) -> np.ndarray:
        q = self.normalized()
        v = np.array([q.x, q.y, q.z])
        s = float(np.linalg.norm(v))
        if s < 1e-9:
            # theta/s = 2/w - 2 s^2 / (3 w^3) + O(s^4)
            factor = 2.0 / q.w - 2.0 * s * s / (3.0 * q.w**3)
        else:
            factor = 2.0 * math.atan2(s, q.w) / s
        return factor * v

    def angle(self) -> float:
        q = self.normalized()
        return 2.0 * math.atan2(math.sqrt(q.x**2 + q.y**2 + q.z**2), q.w)

    @staticmethod
    def identity() -> "Quaternion":
        return Quaternion(1.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class SE3Pose:
    """Rigid transform: p_out = R p + t.  Canonicalized (unit quaternion, w >= 0)."""

    rotation: Quaternion
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", self.rotation.normalized())
        t = np.asarray(self.translation, dtype=float).reshape(3).copy()
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "SE3Pose":
        return SE3Pose(Quaternion.identity(), np.zeros(3))

    @staticmethod
    def from_matrix(m: np.ndarray) -> "SE3Pose":
        m = np.asarray(m, dtype=float)
        return SE3Pose(Quaternion.from_matrix(m[:3, :3]), m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation.to_matrix()
        m[:3, 3] = self.translation
        return m

    def compose(self, other: "SE3Pose") -> "SE3Pose":
        r = self.rotation * other.rotation
        t = self.rotation.to_matrix() @ other.translation + self.translation
        return SE3Pose(r, t)

    def __matmul__(self, other: "SE3Pose") -> "SE3Pose":
        return self.compose(other)

    def inverse(self) -> "SE3Pose":
        rinv = self.rotation.conjugate()
        return SE3Pose(rinv, -(rinv.to_matrix() @ self.translation))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform an (..., 3) array of points."""
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.to_matrix().T + self.translation


@dataclass(frozen=True)
class Sim3Transform:
    """Similarity transform: p_out = s R p + t, scale s > 0."""

    scale: float
    rotation: Quaternion
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if not self.scale > 0.0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        object.__setattr__(self, "rotation", self.rotation.normalized())
        t = np.asarray(self.translation, dtype=float).reshape(3).copy()
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "Sim3Transform":
        return Sim3Transform(1.0, Quaternion.identity(), np.zeros(3))

    @staticmethod
    def from_se3(pose: SE3Pose) -> "Sim3Transform":
        return Sim3Transform(1.0, pose.rotation, pose.translation)

    def compose(self, other: "Sim3Transform") -> "Sim3Transform":
        r = self.rotation * other.rotation
        t = self.scale * (self.rotation.to_matrix() @ other.translation) + self.translation
        return Sim3Transform(self.scale * other.scale, r, t)

    def inverse(self) -> "Sim3Transform":
        rinv = self.rotation.conjugate()
        s = 1.0 / self.scale
        return Sim3Transform(s, rinv, -s * (rinv.to_matrix() @ self.translation))

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return self.scale * (points @ self.rotation.to_matrix().T) + self.translation


def _exp_coeffs(theta: float) -> tuple[float, float]:
    """Coefficients A = (1-cos)/th^2 and B = (th-sin)/th^3 of the V matrix."""
    if theta < _SERIES_ANGLE:
        t2 = theta * theta
        return 0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0
    half_sin = math.sin(0.5 * theta)
    a = 2.0 * half_sin * half_sin / (theta * theta)
    b = (theta - math.sin(theta)) / theta**3
    return a, b


def _v_matrix(w: np.ndarray, theta: float) -> np.ndarray:
    a, b = _exp_coeffs(theta)
    k = _skew(w)
    return np.eye(3) + a * k + b * (k @ k)


def _v_inverse(w: np.ndarray, theta: float) -> np.ndarray:
    if theta < _SERIES_ANGLE:
        c = 1.0 / 12.0 + theta * theta / 720.0
    else:
        c = (1.0 - 0.5 * theta / math.tan(0.5 * theta)) / (theta * theta)
    k = _skew(w)
    return np.eye(3) - 0.5 * k + c * (k @ k)


def se3_exp(xi: np.ndarray) -> SE3Pose:
    """Exponential map of a twist [w, rho] (rotational part first) to SE3."""
    xi = np.asarray(xi, dtype=float).reshape(6)
    w, rho = xi[:3], xi[3:]
    theta = float(np.linalg.norm(w))
    return SE3Pose(Quaternion.from_rotvec(w), _v_matrix(w, theta) @ rho)


def se3_log(pose: SE3Pose) -> np.ndarray:
    """Logarithm map to a twist [w, rho]; rejects rotation angles near pi."""
    angle = pose.rotation.angle()
    if angle > _MAX_LOG_ANGLE:
        raise DegenerateRotationError(f"rotation angle {angle:.9f} too close to pi")
    w = pose.rotation.to_rotvec()
    rho = _v_inverse(w, angle) @ pose.translation
    return np.concatenate([w, rho])
