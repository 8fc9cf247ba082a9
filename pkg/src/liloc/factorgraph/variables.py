"""Variable keys and the manifold operations the solver needs.

Pose tangent is (rotation, translation) with ``R <- R Exp(dtheta)`` and
``p <- p + dp``; velocities (3) and biases (6: accel then gyro) are vectors.
"""

from __future__ import annotations

from typing import NamedTuple, Union

import numpy as np

from liloc.geometry import Pose, Rotation, right_jacobian_inv, so3_exp, so3_log

POSE, VELOCITY, BIAS = "pose", "velocity", "bias"
DIMS = {POSE: 6, VELOCITY: 3, BIAS: 6}

Value = Union[Pose, np.ndarray]


class Key(NamedTuple):
    session: str
    index: int
    kind: str

    def __str__(self) -> str:
        return f"{self.session}:{self.index}:{self.kind}"

    @property
    def dim(self) -> int:
        return DIMS[self.kind]


def pose_key(session: str, index: int) -> Key:
    return Key(session, int(index), POSE)


def velocity_key(session: str, index: int) -> Key:
    return Key(session, int(index), VELOCITY)


def bias_key(session: str, index: int) -> Key:
    return Key(session, int(index), BIAS)


def check_value(key: Key, value: Value) -> Value:
    if key.kind not in DIMS:
        raise ValueError(f"unknown variable kind {key.kind!r}")
    if key.kind == POSE:
        if not isinstance(value, Pose):
            raise TypeError(f"{key} needs a Pose value")
        return value
    v = np.array(value, dtype=float).reshape(DIMS[key.kind])
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{key} value must be finite")
    return v


def retract(kind: str, value: Value, delta: np.ndarray) -> Value:
    if kind == POSE:
        R = value.R @ so3_exp(delta[:3])
        return Pose(Rotation.from_matrix(R), value.translation + delta[3:6], value.timestamp)
    return value + delta


def local(kind: str, origin: Value, value: Value) -> np.ndarray:
    """Tangent vector d with retract(origin, d) == value."""
    if kind == POSE:
        return np.r_[so3_log(origin.R.T @ value.R), value.translation - origin.translation]
    return np.asarray(value - origin, dtype=float)


def local_jacobian(kind: str, origin: Value, value: Value) -> np.ndarray:
    """d local(origin, retract(value, e)) / de at e = 0."""
    if kind == POSE:
        J = np.eye(6)
        J[:3, :3] = right_jacobian_inv(so3_log(origin.R.T @ value.R))
        return J
    return np.eye(DIMS[kind])


def format_value(kind: str, value: Value) -> str:
    if kind == POSE:
        q = value.rotation.quat
        nums = list(value.translation) + [q[1], q[2], q[3], q[0]]
    else:
        nums = list(value)
    return " ".join(f"{x:.9g}" for x in nums)
