"""IMU preintegration on the rotation manifold.

Measurements between two keyframe times are integrated once, with the
midpoint rule, into a relative rotation / velocity / position delta that is
independent of the absolute states. Gravity is left out of the delta and
enters only through the residual. Bias changes are handled by first-order
correction with the Jacobians accumulated during integration.

Residuals are ordered (rotation, position, velocity); pose tangents are
(rotation, translation) with the update R <- R Exp(dtheta), p <- p + dp.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from liloc.geometry import (
    Pose,
    Rotation,
    right_jacobian,
    right_jacobian_inv,
    skew,
    so3_exp,
    so3_log,
)

GRAVITY = np.array([0.0, 0.0, -9.81])


class ImuOrderError(ValueError):
    """Timestamps are not strictly increasing."""


@dataclass(frozen=True)
class ImuSample:
    timestamp: float
    gyro: np.ndarray
    accel: np.ndarray


@dataclass(frozen=True)
class ImuNoise:
    """Continuous-time noise densities."""

    gyro: float = 1e-3  # rad/s/sqrt(Hz)
    accel: float = 1e-2  # m/s^2/sqrt(Hz)
    gyro_bias_walk: float = 1e-5  # rad/s^2/sqrt(Hz)
    accel_bias_walk: float = 1e-4  # m/s^3/sqrt(Hz)


class ImuSeries:
    """Column-oriented IMU stream: times (n,), gyro (n, 3), accel (n, 3)."""

    def __init__(self, times, gyro, accel):
        self.times = np.asarray(times, dtype=float).reshape(-1)
        self.gyro = np.asarray(gyro, dtype=float).reshape(-1, 3)
        self.accel = np.asarray(accel, dtype=float).reshape(-1, 3)
        if not (len(self.times) == len(self.gyro) == len(self.accel)):
            raise ValueError("IMU columns differ in length")
        if len(self.times) > 1 and np.any(np.diff(self.times) <= 0.0):
            raise ImuOrderError("IMU timestamps must be strictly increasing")

    @classmethod
    def from_samples(cls, samples: Iterable[ImuSample]) -> ImuSeries:
        samples = list(samples)
        if not samples:
            return cls(np.zeros(0), np.zeros((0, 3)), np.zeros((0, 3)))
        return cls(
            [s.timestamp for s in samples],
            [s.gyro for s in samples],
            [s.accel for s in samples],
        )

    def __len__(self) -> int:
        return len(self.times)

    def __iter__(self):
        for t, w, a in zip(self.times, self.gyro, self.accel):
            yield ImuSample(float(t), w, a)

    def _interp(self, t: float):
        w = np.array([np.interp(t, self.times, self.gyro[:, i]) for i in range(3)])
        a = np.array([np.interp(t, self.times, self.accel[:, i]) for i in range(3)])
        return w, a

    def segment(self, t0: float, t1: float) -> ImuSeries:
        """Samples inside (t0, t1) plus linearly interpolated samples at both ends."""
        if t1 < t0:
            raise ValueError("segment end precedes start")
        if len(self) == 0:
            return self
        inner = (self.times > t0) & (self.times < t1)
        w0, a0 = self._interp(t0)
        if t1 == t0:
            return ImuSeries([t0], [w0], [a0])
        w1, a1 = self._interp(t1)
        return ImuSeries(
            np.r_[t0, self.times[inner], t1],
            np.vstack([w0, self.gyro[inner], w1]),
            np.vstack([a0, self.accel[inner], a1]),
        )

    def write_csv(self, path) -> None:
        data = np.column_stack([self.times, self.gyro, self.accel])
        np.savetxt(path, data, delimiter=",", fmt="%.9f", header="t,wx,wy,wz,ax,ay,az", comments="")

    @classmethod
    def read_csv(cls, path) -> ImuSeries:
        lines = [
            ln for ln in Path(path).read_text().splitlines()
            if ln.strip() and not ln.lstrip().startswith(("#", "t,"))
        ]
        if not lines:
            return cls(np.zeros(0), np.zeros((0, 3)), np.zeros((0, 3)))
        data = np.loadtxt(lines, delimiter=",", ndmin=2)
        if data.shape[1] != 7:
            raise ValueError(f"{path}: expected 7 IMU columns, got {data.shape[1]}")
        return cls(data[:, 0], data[:, 1:4], data[:, 4:7])


def _as_series(samples) -> ImuSeries:
    if isinstance(samples, ImuSeries):
        return samples
    return ImuSeries.from_samples(samples)


@dataclass(frozen=True)
class PreintegratedDelta:
    delta_R: np.ndarray  # 3x3
    delta_V: np.ndarray
    delta_P: np.ndarray
    dt: float
    bias_accel: np.ndarray
    bias_gyro: np.ndarray
    # 9x9 covariance of (dtheta, dv, dp)
    covariance: np.ndarray
    J_R_bg: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    J_V_ba: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    J_V_bg: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    J_P_ba: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    J_P_bg: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    t_start: Optional[float] = None
    t_end: Optional[float] = None

    @property
    def rotation(self) -> Rotation:
        return Rotation.from_matrix(self.delta_R)

    def corrected(self, bias_accel, bias_gyro):
        """First-order bias-corrected (dR, dV, dP)."""
        dba = np.asarray(bias_accel, dtype=float) - self.bias_accel
        dbg = np.asarray(bias_gyro, dtype=float) - self.bias_gyro
        dR = self.delta_R @ so3_exp(self.J_R_bg @ dbg)
        dV = self.delta_V + self.J_V_ba @ dba + self.J_V_bg @ dbg
        dP = self.delta_P + self.J_P_ba @ dba + self.J_P_bg @ dbg
        return dR, dV, dP

    def residual_covariance(self) -> np.ndarray:
        """Covariance reordered to the residual layout (rotation, position, velocity)."""
        perm = np.r_[0:3, 6:9, 3:6]
        return self.covariance[np.ix_(perm, perm)]


def integrate(
    samples: Union[ImuSeries, Sequence[ImuSample]],
    bias_accel=None,
    bias_gyro=None,
    gravity=GRAVITY,
    noise: ImuNoise = ImuNoise(),
    max_dt: float = 0.1,
) -> PreintegratedDelta:
    """Midpoint preintegration of consecutive samples in the frame of the first.

    ``gravity`` is accepted for interface symmetry with the residual; it is
    deliberately not applied to the delta.
    """
    del gravity
    series = _as_series(samples)
    ba = np.zeros(3) if bias_accel is None else np.asarray(bias_accel, dtype=float)
    bg = np.zeros(3) if bias_gyro is None else np.asarray(bias_gyro, dtype=float)
    dR = np.eye(3)
    dV = np.zeros(3)
    dP = np.zeros(3)
    cov = np.zeros((9, 9))
    JRg = np.zeros((3, 3))
    JVa = np.zeros((3, 3))
    JVg = np.zeros((3, 3))
    JPa = np.zeros((3, 3))
    JPg = np.zeros((3, 3))
    total = 0.0
    t = series.times
    for k in range(len(series) - 1):
        h = t[k + 1] - t[k]
        if h <= 0.0:
            raise ImuOrderError("IMU timestamps must be strictly increasing")
        if h > max_dt:
            raise ValueError(f"IMU gap of {h:.3f} s exceeds {max_dt} s")
        w = 0.5 * (series.gyro[k] + series.gyro[k + 1]) - bg
        a0 = series.accel[k] - ba
        a1 = series.accel[k + 1] - ba
        dRk = so3_exp(w * h)
        R_next = dR @ dRk
        acc = 0.5 * (dR @ a0 + R_next @ a1)
        a_body = 0.5 * (a0 + dRk @ a1)
        Jr = right_jacobian(w * h)
        Ax = skew(a_body)

        # bias Jacobians of the midpoint step, differentiated exactly
        JRg_next = dRk.T @ JRg - Jr * h
        dacc_a = -0.5 * (dR + R_next)
        dacc_g = -0.5 * (dR @ skew(a0) @ JRg + R_next @ skew(a1) @ JRg_next)
        JPa = JPa + JVa * h + 0.5 * dacc_a * h * h
        JPg = JPg + JVg * h + 0.5 * dacc_g * h * h
        JVa = JVa + dacc_a * h
        JVg = JVg + dacc_g * h
        JRg = JRg_next

        A = np.eye(9)
        A[0:3, 0:3] = dRk.T
        A[3:6, 0:3] = -dR @ Ax * h
        A[6:9, 0:3] = -0.5 * dR @ Ax * h * h
        A[6:9, 3:6] = np.eye(3) * h
        Bg = np.zeros((9, 3))
        Bg[0:3] = Jr * h
        Ba = np.zeros((9, 3))
        Ba[3:6] = dR * h
        Ba[6:9] = 0.5 * dR * h * h
        qg = noise.gyro**2 / h
        qa = noise.accel**2 / h
        cov = A @ cov @ A.T + qg * (Bg @ Bg.T) + qa * (Ba @ Ba.T)

        dP = dP + dV * h + 0.5 * acc * h * h
        dV = dV + acc * h
        dR = R_next
        total += h
    cov = 0.5 * (cov + cov.T)
    return PreintegratedDelta(
        dR, dV, dP, total, ba.copy(), bg.copy(), cov,
        JRg, JVa, JVg, JPa, JPg,
        float(t[0]) if len(t) else None,
        float(t[-1]) if len(t) else None,
    )


def compose_deltas(a: PreintegratedDelta, b: PreintegratedDelta) -> PreintegratedDelta:
    """Delta over [i, k] from deltas over [i, j] and [j, k] (same bias point)."""
    dR = a.delta_R @ b.delta_R
    dV = a.delta_V + a.delta_R @ b.delta_V
    dP = a.delta_P + a.delta_V * b.dt + a.delta_R @ b.delta_P
    return PreintegratedDelta(
        dR, dV, dP, a.dt + b.dt, a.bias_accel, a.bias_gyro,
        a.covariance, t_start=a.t_start, t_end=b.t_end,
    )


@dataclass
class NavState:
    pose: Pose
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    bias_accel: np.ndarray = field(default_factory=lambda: np.zeros(3))
    bias_gyro: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.velocity = np.asarray(self.velocity, dtype=float).reshape(3)
        self.bias_accel = np.asarray(self.bias_accel, dtype=float).reshape(3)
        self.bias_gyro = np.asarray(self.bias_gyro, dtype=float).reshape(3)
        for v in (self.velocity, self.bias_accel, self.bias_gyro):
            if not np.all(np.isfinite(v)):
                raise ValueError("navigation state must be finite")

    @property
    def bias(self) -> np.ndarray:
        return np.r_[self.bias_accel, self.bias_gyro]


def predict(state: NavState, delta: PreintegratedDelta, gravity=GRAVITY) -> NavState:
    """Propagate a state through a delta (with bias correction)."""
    g = np.asarray(gravity, dtype=float)
    R = state.pose.R
    dR, dV, dP = delta.corrected(state.bias_accel, state.bias_gyro)
    dt = delta.dt
    p = state.pose.translation + state.velocity * dt + 0.5 * g * dt * dt + R @ dP
    v = state.velocity + g * dt + R @ dV
    t = None
    if state.pose.timestamp is not None:
        t = state.pose.timestamp + dt
    return NavState(Pose(Rotation.from_matrix(R @ dR), p, t), v, state.bias_accel, state.bias_gyro)


def residual(delta: PreintegratedDelta, state_i: NavState, state_j: NavState, gravity=GRAVITY):
    """9-vector residual (rotation, position, velocity) and its Jacobians.

    Returns ``(r, jacobians)`` where ``jacobians`` maps each of
    ``pose_i, velocity_i, bias_i, pose_j, velocity_j`` to a 9 x d block;
    bias tangents are (accel, gyro).
    """
    return _residual(
        delta,
        state_i.pose.R, state_i.pose.translation, state_i.velocity,
        np.r_[state_i.bias_accel, state_i.bias_gyro],
        state_j.pose.R, state_j.pose.translation, state_j.velocity,
        np.asarray(gravity, dtype=float),
    )


def _residual(delta: PreintegratedDelta, Ri, pi, vi, bi, Rj, pj, vj, g):
    dt = delta.dt
    dba = bi[:3] - delta.bias_accel
    dbg = bi[3:] - delta.bias_gyro
    phi = delta.J_R_bg @ dbg
    dR = delta.delta_R @ so3_exp(phi)
    dV = delta.delta_V + delta.J_V_ba @ dba + delta.J_V_bg @ dbg
    dP = delta.delta_P + delta.J_P_ba @ dba + delta.J_P_bg @ dbg
    RiT = Ri.T
    E = dR.T @ RiT @ Rj
    rR = so3_log(E)
    wp = RiT @ (pj - pi - vi * dt - 0.5 * g * dt * dt)
    wv = RiT @ (vj - vi - g * dt)
    r = np.r_[rR, wp - dP, wv - dV]

    Jri = right_jacobian_inv(rR)
    J_pose_i = np.zeros((9, 6))
    J_pose_i[0:3, 0:3] = -Jri @ Rj.T @ Ri
    J_pose_i[3:6, 0:3] = skew(wp)
    J_pose_i[3:6, 3:6] = -RiT
    J_pose_i[6:9, 0:3] = skew(wv)

    J_vel_i = np.zeros((9, 3))
    J_vel_i[3:6] = -RiT * dt
    J_vel_i[6:9] = -RiT

    J_bias_i = np.zeros((9, 6))
    J_bias_i[0:3, 3:6] = -Jri @ E.T @ right_jacobian(phi) @ delta.J_R_bg
    J_bias_i[3:6, 0:3] = -delta.J_P_ba
    J_bias_i[3:6, 3:6] = -delta.J_P_bg
    J_bias_i[6:9, 0:3] = -delta.J_V_ba
    J_bias_i[6:9, 3:6] = -delta.J_V_bg

    J_pose_j = np.zeros((9, 6))
    J_pose_j[0:3, 0:3] = Jri
    J_pose_j[3:6, 3:6] = RiT

    J_vel_j = np.zeros((9, 3))
    J_vel_j[6:9] = RiT

    return r, {
        "pose_i": J_pose_i,
        "velocity_i": J_vel_i,
        "bias_i": J_bias_i,
        "pose_j": J_pose_j,
        "velocity_j": J_vel_j,
    }
