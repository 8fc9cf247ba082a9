"""Rigid-body geometry on SO(3) and SE(3).

Rotations are stored as unit quaternions ``(w, x, y, z)`` and renormalized
after every composition. Tangent vectors are ordered rotation first, then
translation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

SMALL_ANGLE = 1e-8
# log() refuses rotations closer to pi than this
PI_MARGIN = 1e-6


class NearSingularLogError(ValueError):
    """Raised when a logarithm is requested for a rotation angle near pi."""


def skew(v) -> np.ndarray:
    return np.array(
        [[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]]
    )


def so3_exp(w) -> np.ndarray:
    """Rodrigues formula: rotation vector to 3x3 matrix."""
    w = np.asarray(w, dtype=float)
    theta2 = float(w @ w)
    W = skew(w)
    if theta2 < SMALL_ANGLE**2:
        return np.eye(3) + W + 0.5 * (W @ W)
    theta = math.sqrt(theta2)
    return (
        np.eye(3)
        + (math.sin(theta) / theta) * W
        + ((1.0 - math.cos(theta)) / theta2) * (W @ W)
    )


def matrix_to_quat(R) -> np.ndarray:
    """Shepperd's method; returns a quaternion with w >= 0."""
    R = np.asarray(R, dtype=float)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0.0:
        s = 2.0 * math.sqrt(tr + 1.0)
        q = np.array(
            [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
        )
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = np.array(
            [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
        )
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = np.array(
            [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
        )
    else:
        s = 2.0 * math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = np.array(
            [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
        )
    if q[0] < 0.0:
        q = -q
    return q / np.linalg.norm(q)


def quat_to_matrix(q) -> np.ndarray:
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


def quat_exp(w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    theta = float(np.linalg.norm(w))
    if theta < SMALL_ANGLE:
        q = np.array([1.0, 0.5 * w[0], 0.5 * w[1], 0.5 * w[2]])
        return q / np.linalg.norm(q)
    half = 0.5 * theta
    s = math.sin(half) / theta
    return np.array([math.cos(half), s * w[0], s * w[1], s * w[2]])


def quat_log(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q[0] < 0.0:
        q = -q
    v = q[1:]
    vn = float(np.linalg.norm(v))
    if vn < SMALL_ANGLE:
        return 2.0 * v / q[0]
    theta = 2.0 * math.atan2(vn, q[0])
    if theta >= math.pi - PI_MARGIN:
        raise NearSingularLogError(f"rotation angle {theta:.9f} is too close to pi")
    return (theta / vn) * v


def so3_log(R) -> np.ndarray:
    """Rotation matrix to rotation vector, via the quaternion for stability."""
    return quat_log(matrix_to_quat(R))


SERIES_ANGLE = 1e-2


def _coefficients(theta2: float):
    """(1-cos)/t^2, (t-sin)/t^3 and the shared inverse-Jacobian coefficient."""
    if theta2 < SERIES_ANGLE**2:
        b = 0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0
        c = 1.0 / 6.0 - theta2 / 120.0 + theta2 * theta2 / 5040.0
        d = 1.0 / 12.0 + theta2 / 720.0 + theta2 * theta2 / 30240.0
        return b, c, d
    theta = math.sqrt(theta2)
    s = math.sin(theta)
    one_minus_cos = 2.0 * math.sin(0.5 * theta) ** 2
    b = one_minus_cos / theta2
    c = (theta - s) / (theta2 * theta)
    d = (1.0 - theta * s / (2.0 * one_minus_cos)) / theta2
    return b, c, d


def right_jacobian(w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    b, c, _ = _coefficients(float(w @ w))
    W = skew(w)
    return np.eye(3) - b * W + c * (W @ W)


def right_jacobian_inv(w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    _, _, d = _coefficients(float(w @ w))
    W = skew(w)
    return np.eye(3) + 0.5 * W + d * (W @ W)


def _se3_v(w) -> np.ndarray:
    b, c, _ = _coefficients(float(w @ w))
    W = skew(w)
    return np.eye(3) + b * W + c * (W @ W)


def _se3_v_inv(w) -> np.ndarray:
    _, _, d = _coefficients(float(w @ w))
    W = skew(w)
    return np.eye(3) - 0.5 * W + d * (W @ W)


@dataclass(frozen=True)
class Rotation:
    """Element of SO(3), held as a unit quaternion (w, x, y, z)."""

    quat: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))

    def __post_init__(self):
        q = np.asarray(self.quat, dtype=float).reshape(4)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n == 0.0:
            raise ValueError("quaternion must be finite and non-zero")
        q = q / n
        if q[0] < 0.0:
            q = -q
        q.setflags(write=False)
        object.__setattr__(self, "quat", q)

    @classmethod
    def identity(cls) -> Rotation:
        return cls()

    @classmethod
    def from_matrix(cls, R) -> Rotation:
        return cls(matrix_to_quat(R))

    @classmethod
    def exp(cls, w) -> Rotation:
        return cls(quat_exp(w))

    @classmethod
    def from_rpy(cls, roll: float, pitch: float, yaw: float) -> Rotation:
        q = quat_multiply(
            quat_exp([0.0, 0.0, yaw]),
            quat_multiply(quat_exp([0.0, pitch, 0.0]), quat_exp([roll, 0.0, 0.0])),
        )
        return cls(q)

    @classmethod
    def yaw(cls, angle: float) -> Rotation:
        return cls(quat_exp([0.0, 0.0, angle]))

    @property
    def matrix(self) -> np.ndarray:
        return quat_to_matrix(self.quat)

    def log(self) -> np.ndarray:
        return quat_log(self.quat)

    def angle(self) -> float:
        return 2.0 * math.atan2(float(np.linalg.norm(self.quat[1:])), abs(float(self.quat[0])))

    def inverse(self) -> Rotation:
        q = self.quat
        return Rotation(np.array([q[0], -q[1], -q[2], -q[3]]))

    def compose(self, other: Rotation) -> Rotation:
        return Rotation(quat_multiply(self.quat, other.quat))

    def __mul__(self, other: Rotation) -> Rotation:
        return self.compose(other)

    def apply(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return points @ self.matrix.T

    def rpy(self) -> np.ndarray:
        R = self.matrix
        pitch = math.asin(max(-1.0, min(1.0, -R[2, 0])))
        roll = math.atan2(R[2, 1], R[2, 2])
        yaw = math.atan2(R[1, 0], R[0, 0])
        return np.array([roll, pitch, yaw])


@dataclass(frozen=True)
class Twist:
    """Tangent vector of SE(3): rotational part (rad) then translational part (m)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        for name in ("rotation", "translation"):
            v = np.array(getattr(self, name), dtype=float).reshape(3)
            v.setflags(write=False)
            object.__setattr__(self, name, v)

    @classmethod
    def from_vector(cls, xi) -> Twist:
        xi = np.asarray(xi, dtype=float)
        return cls(xi[:3], xi[3:6])

    def vector(self) -> np.ndarray:
        return np.concatenate([self.rotation, self.translation])


@dataclass(frozen=True)
class Pose:
    """Element of SE(3) with an optional timestamp in seconds."""

    rotation: Rotation = field(default_factory=Rotation)
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    timestamp: Optional[float] = None

    def __post_init__(self):
        t = np.array(self.translation, dtype=float).reshape(3)
        if not np.all(np.isfinite(t)):
            raise ValueError("translation must be finite")
        t.setflags(write=False)
        object.__setattr__(self, "translation", t)
        if not isinstance(self.rotation, Rotation):
            object.__setattr__(self, "rotation", Rotation.from_matrix(self.rotation))

    @classmethod
    def identity(cls, timestamp: Optional[float] = None) -> Pose:
        return cls(timestamp=timestamp)

    @classmethod
    def from_matrix(cls, T, timestamp: Optional[float] = None) -> Pose:
        T = np.asarray(T, dtype=float)
        return cls(Rotation.from_matrix(T[:3, :3]), T[:3, 3], timestamp)

    @classmethod
    def from_rt(cls, R, t, timestamp: Optional[float] = None) -> Pose:
        return cls(Rotation.from_matrix(R), t, timestamp)

    @classmethod
    def from_xyz_rpy(cls, x, y, z, roll=0.0, pitch=0.0, yaw=0.0, timestamp=None) -> Pose:
        return cls(Rotation.from_rpy(roll, pitch, yaw), [x, y, z], timestamp)

    @classmethod
    def exp(cls, xi) -> Pose:
        if isinstance(xi, Twist):
            w, rho = xi.rotation, xi.translation
        else:
            xi = np.asarray(xi, dtype=float)
            w, rho = xi[:3], xi[3:6]
        return cls(Rotation.exp(w), _se3_v(np.asarray(w, dtype=float)) @ rho)

    def log(self) -> Twist:
        w = self.rotation.log()
        return Twist(w, _se3_v_inv(w) @ self.translation)

    @property
    def R(self) -> np.ndarray:
        return self.rotation.matrix

    @property
    def t(self) -> np.ndarray:
        return self.translation

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation.matrix
        T[:3, 3] = self.translation
        return T

    def compose(self, other: Pose) -> Pose:
        return Pose(
            self.rotation.compose(other.rotation),
            self.rotation.matrix @ other.translation + self.translation,
            other.timestamp if other.timestamp is not None else self.timestamp,
        )

    def __matmul__(self, other: Pose) -> Pose:
        return self.compose(other)

    def inverse(self) -> Pose:
        Rinv = self.rotation.inverse()
        return Pose(Rinv, -(Rinv.matrix @ self.translation), self.timestamp)

    def apply(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.matrix.T + self.translation

    def with_timestamp(self, timestamp: Optional[float]) -> Pose:
        return Pose(self.rotation, self.translation, timestamp)

    def yaw(self) -> float:
        return float(self.rotation.rpy()[2])


def compose(a: Pose, b: Pose) -> Pose:
    return a.compose(b)


def relative(a: Pose, b: Pose) -> Pose:
    """Transform of ``b`` expressed in the frame of ``a``: inverse(a) * b."""
    return a.inverse().compose(b)


def log(T: Pose) -> Twist:
    return T.log()


def exp(xi) -> Pose:
    return Pose.exp(xi)


def translation_distance(a: Pose, b: Pose) -> float:
    return float(np.linalg.norm(relative(a, b).translation))


def rotation_distance(a: Pose, b: Pose) -> float:
    return relative(a, b).rotation.angle()


def interpolate(a: Pose, b: Pose, s: float) -> Pose:
    """Slerp on rotation, linear on translation; s=0 gives a, s=1 gives b."""
    dr = a.rotation.inverse().compose(b.rotation).log()
    return Pose(
        a.rotation.compose(Rotation.exp(s * dr)),
        (1.0 - s) * a.translation + s * b.translation,
    )
