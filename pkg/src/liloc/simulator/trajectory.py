"""Smooth ground-vehicle trajectories with analytic derivatives.

A route is a polyline with rounded corners, parametrized by arc length with
a C2 cubic spline. The vehicle follows it with a speed profile that ramps
smoothly from rest to cruise speed and back, so position is C2 in time.
Orientation is the path heading (yaw) with zero roll and pitch; angular
velocity follows analytically from the path curvature.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
from scipy.interpolate import CubicSpline

from liloc.geometry import Pose, Rotation


def rounded_polyline(corners: Sequence[Tuple[float, float]], radius: float = 5.0, step: float = 0.25):
    """Dense xy samples along straight segments joined by circular arcs."""
    pts = [np.asarray(c, dtype=float) for c in corners]
    if len(pts) < 2:
        raise ValueError("a route needs at least two corners")
    out: List[np.ndarray] = [pts[0]]
    cursor = pts[0]
    for i in range(1, len(pts) - 1):
        a, b, c = pts[i - 1], pts[i], pts[i + 1]
        u1 = (b - a) / np.linalg.norm(b - a)
        u2 = (c - b) / np.linalg.norm(c - b)
        cos_t = float(np.clip(u1 @ u2, -1.0, 1.0))
        turn = np.arccos(cos_t)
        if turn < 1e-6:
            continue
        r = min(radius, 0.45 * np.linalg.norm(b - a), 0.45 * np.linalg.norm(c - b))
        cut = r * np.tan(turn / 2)
        p_in = b - u1 * cut
        p_out = b + u2 * cut
        out += _segment(cursor, p_in, step)
        sign = np.sign(u1[0] * u2[1] - u1[1] * u2[0])
        normal = np.array([-u1[1], u1[0]]) * sign
        centre = p_in + normal * r
        a0 = np.arctan2(p_in[1] - centre[1], p_in[0] - centre[0])
        n_arc = max(2, int(np.ceil(r * turn / step)))
        for k in range(1, n_arc + 1):
            ang = a0 + sign * turn * k / n_arc
            out.append(centre + r * np.array([np.cos(ang), np.sin(ang)]))
        cursor = out[-1]
    out += _segment(cursor, pts[-1], step)
    xy = np.array(out)
    keep = np.r_[True, np.linalg.norm(np.diff(xy, axis=0), axis=1) > 1e-9]
    return xy[keep]


def _segment(a, b, step):
    n = max(1, int(np.ceil(np.linalg.norm(b - a) / step)))
    return [a + (b - a) * k / n for k in range(1, n + 1)]


def _smoothstep_distance(x):
    """Integral of 3x^2 - 2x^3 from 0 to x."""
    return x**3 - 0.5 * x**4


@dataclass
class Trajectory:
    """Route + speed profile; evaluates pose, velocity, acceleration and body rates."""

    xy_spline: CubicSpline
    length: float
    speed: float
    ramp: float
    height: float
    start_time: float = 0.0

    @classmethod
    def from_route(
        cls,
        corners,
        speed: float = 4.0,
        ramp: float = 2.0,
        height: float = 1.8,
        corner_radius: float = 5.0,
        start_time: float = 0.0,
    ) -> Trajectory:
        xy = rounded_polyline(corners, corner_radius)
        s = np.r_[0.0, np.cumsum(np.linalg.norm(np.diff(xy, axis=0), axis=1))]
        spline = CubicSpline(s, xy, axis=0)
        return cls(spline, float(s[-1]), speed, ramp, height, start_time)

    @property
    def ramp_distance(self) -> float:
        return 0.5 * self.speed * self.ramp

    @property
    def duration(self) -> float:
        cruise = max(0.0, self.length - 2 * self.ramp_distance) / self.speed
        return 2 * self.ramp + cruise

    @property
    def end_time(self) -> float:
        return self.start_time + self.duration

    def _arc(self, t):
        """Arc length and its first two time derivatives."""
        t = np.asarray(t, dtype=float) - self.start_time
        T = self.duration
        v, Ta = self.speed, self.ramp
        s = np.zeros_like(t)
        sd = np.zeros_like(t)
        sdd = np.zeros_like(t)
        up = (t >= 0) & (t < Ta)
        x = t[up] / Ta
        s[up] = v * Ta * _smoothstep_distance(x)
        sd[up] = v * (3 * x**2 - 2 * x**3)
        sdd[up] = v * (6 * x - 6 * x**2) / Ta
        cruise = (t >= Ta) & (t <= T - Ta)
        s[cruise] = self.ramp_distance + v * (t[cruise] - Ta)
        sd[cruise] = v
        down = (t > T - Ta) & (t <= T)
        x = (T - t[down]) / Ta
        s[down] = self.length - v * Ta * _smoothstep_distance(x)
        sd[down] = v * (3 * x**2 - 2 * x**3)
        sdd[down] = -v * (6 * x - 6 * x**2) / Ta
        s[t > T] = self.length
        return np.clip(s, 0.0, self.length), sd, sdd

    def state(self, t):
        """Position, velocity, acceleration (n, 3), yaw, yaw rate (n,)."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        s, sd, sdd = self._arc(t)
        P = self.xy_spline(s)
        P1 = self.xy_spline(s, 1)
        P2 = self.xy_spline(s, 2)
        n = t.shape[0]
        pos = np.column_stack([P, np.full(n, self.height)])
        vel = np.column_stack([P1 * sd[:, None], np.zeros(n)])
        acc = np.column_stack([P2 * (sd**2)[:, None] + P1 * sdd[:, None], np.zeros(n)])
        yaw = np.arctan2(P1[:, 1], P1[:, 0])
        speed2 = P1[:, 0] ** 2 + P1[:, 1] ** 2
        curvature = (P1[:, 0] * P2[:, 1] - P1[:, 1] * P2[:, 0]) / speed2
        yaw_rate = curvature * sd
        return pos, vel, acc, yaw, yaw_rate

    def pose(self, t: float) -> Pose:
        pos, _, _, yaw, _ = self.state(t)
        return Pose(Rotation.yaw(float(yaw[0])), pos[0], float(t))

    def poses(self, times) -> List[Pose]:
        pos, _, _, yaw, _ = self.state(times)
        return [Pose(Rotation.yaw(float(y)), p, float(t)) for p, y, t in zip(pos, yaw, np.atleast_1d(times))]

    def rotation_matrices(self, times) -> np.ndarray:
        _, _, _, yaw, _ = self.state(times)
        c, s = np.cos(yaw), np.sin(yaw)
        R = np.zeros((len(yaw), 3, 3))
        R[:, 0, 0] = c
        R[:, 0, 1] = -s
        R[:, 1, 0] = s
        R[:, 1, 1] = c
        R[:, 2, 2] = 1.0
        return R


@dataclass
class StaticTrajectory:
    """A body that never moves; same interface as ``Trajectory``."""

    position: Tuple[float, float, float] = (0.0, 0.0, 1.8)
    heading: float = 0.0
    duration: float = 1.0
    start_time: float = 0.0

    @property
    def end_time(self) -> float:
        return self.start_time + self.duration

    def state(self, t):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        n = t.shape[0]
        pos = np.tile(np.asarray(self.position, dtype=float), (n, 1))
        zeros = np.zeros((n, 3))
        return pos, zeros, zeros.copy(), np.full(n, self.heading), np.zeros(n)

    pose = Trajectory.pose
    poses = Trajectory.poses
    rotation_matrices = Trajectory.rotation_matrices
