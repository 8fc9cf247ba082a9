"""Raycast LiDAR and analytic IMU synthesis."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from liloc.geometry import Pose
from liloc.imu import GRAVITY, ImuSeries
from liloc.pointcloud.cloud import PointCloud
from liloc.simulator.world import World


@dataclass(frozen=True)
class SensorRig:
    channels: int = 16
    vertical_fov: tuple = (-15.0, 15.0)  # degrees
    horizontal_resolution: float = 0.5  # degrees per column
    max_range: float = 50.0
    min_range: float = 0.5
    lidar_rate: float = 10.0
    range_noise: float = 0.0
    imu_rate: float = 100.0
    gyro_noise: float = 0.0  # rad/s/sqrt(Hz)
    accel_noise: float = 0.0  # m/s^2/sqrt(Hz)
    gyro_bias_walk: float = 0.0  # rad/s^2/sqrt(Hz)
    accel_bias_walk: float = 0.0  # m/s^3/sqrt(Hz)
    gyro_bias: tuple = (0.0, 0.0, 0.0)
    accel_bias: tuple = (0.0, 0.0, 0.0)
    extrinsic: Pose = field(default_factory=Pose.identity)

    def __post_init__(self):
        if self.lidar_rate <= 0 or self.imu_rate <= 0:
            raise ValueError("sensor rates must be positive")
        if self.max_range <= 0:
            raise ValueError("max range must be positive")
        if self.channels < 1 or self.horizontal_resolution <= 0:
            raise ValueError("invalid beam layout")

    @property
    def columns(self) -> int:
        return int(round(360.0 / self.horizontal_resolution))

    @property
    def period(self) -> float:
        return 1.0 / self.lidar_rate

    def beam_directions(self) -> np.ndarray:
        """Unit beam directions in the LiDAR frame, shape (columns, channels, 3)."""
        if self.channels == 1:
            elev = np.zeros(1)
        else:
            elev = np.deg2rad(np.linspace(self.vertical_fov[0], self.vertical_fov[1], self.channels))
        azim = np.deg2rad(np.arange(self.columns) * self.horizontal_resolution)
        ce, se = np.cos(elev), np.sin(elev)
        ca, sa = np.cos(azim), np.sin(azim)
        d = np.empty((self.columns, self.channels, 3))
        d[..., 0] = ca[:, None] * ce[None, :]
        d[..., 1] = sa[:, None] * ce[None, :]
        d[..., 2] = se[None, :]
        return d


def _intersect(world: World, origins: np.ndarray, dirs: np.ndarray, max_range: float,
               centre: np.ndarray, reach: float, sector: int = 384) -> np.ndarray:
    """Range to the nearest patch along each ray, inf when nothing is hit.

    Rays are processed in consecutive blocks of ``sector`` (one azimuth wedge
    for a column-major beam layout); each block only tests patches whose
    bounding sphere can fall inside the block's azimuth span.
    """
    C, U, V, N, hu, hv, radius = world.arrays()
    n_rays = dirs.shape[0]
    ranges = np.full(n_rays, np.inf)
    if len(C) == 0 or n_rays == 0:
        return ranges
    rel = C - centre
    dist = np.linalg.norm(rel, axis=1)
    near = dist - radius <= max_range + reach
    idx_near = np.flatnonzero(near)
    if idx_near.size == 0:
        return ranges
    rel_xy = np.hypot(rel[idx_near, 0], rel[idx_near, 1])
    bound = radius[idx_near] + reach
    patch_az = np.arctan2(rel[idx_near, 1], rel[idx_near, 0])
    with np.errstate(divide="ignore", invalid="ignore"):
        half = np.where(rel_xy > bound, np.arcsin(np.clip(bound / rel_xy, 0.0, 1.0)), np.pi)
    offs_all = (
        np.einsum("ij,ij->i", C, N),
        np.einsum("ij,ij->i", C, U),
        np.einsum("ij,ij->i", C, V),
    )
    for start in range(0, n_rays, sector):
        stop = min(start + sector, n_rays)
        d_blk = dirs[start:stop]
        o_blk = origins[start:stop]
        az = np.arctan2(d_blk[:, 1], d_blk[:, 0])
        mid = np.arctan2(np.sin(az).sum(), np.cos(az).sum())
        span = np.max(np.abs(np.angle(np.exp(1j * (az - mid)))))
        if np.hypot(d_blk[:, 0], d_blk[:, 1]).min() < 1e-6:
            span = np.pi
        gap = np.abs(np.angle(np.exp(1j * (patch_az - mid))))
        sel = idx_near[gap <= span + half + 1e-9]
        if sel.size == 0:
            continue
        P = sel.size
        M = np.vstack([N[sel], U[sel], V[sel]]).T
        offs = np.r_[offs_all[0][sel], offs_all[1][sel], offs_all[2][sel]]
        d = d_blk @ M
        o = o_blk @ M - offs
        with np.errstate(divide="ignore", invalid="ignore"):
            t = -o[:, :P] / d[:, :P]
            ok = (t > 1e-9) & (t <= max_range)
            du = np.abs(o[:, P:2 * P] + t * d[:, P:2 * P])
            dv = np.abs(o[:, 2 * P:] + t * d[:, 2 * P:])
        ok &= (du <= hu[sel]) & (dv <= hv[sel])
        t[~ok] = np.inf
        ranges[start:stop] = t.min(axis=1)
    return ranges


def _finish(ranges, dirs_local, times, rig: SensorRig, rng) -> PointCloud:
    hit = np.isfinite(ranges) & (ranges >= rig.min_range)
    r = ranges[hit]
    if rig.range_noise > 0 and rng is not None:
        r = r + rng.normal(0.0, rig.range_noise, size=r.shape)
    pts = dirs_local[hit] * r[:, None]
    return PointCloud(pts, times=None if times is None else times[hit])


def raycast_scan(world: World, pose: Pose, rig: SensorRig = SensorRig(), rng=None) -> PointCloud:
    """Instantaneous scan from a static body pose; points in the LiDAR frame.

    Per-point times are spread over the sweep that ends at ``pose.timestamp``
    (or 0), one time per column.
    """
    sensor = pose.compose(rig.extrinsic)
    d_local = rig.beam_directions()
    cols = d_local.shape[0]
    d_local = d_local.reshape(-1, 3)
    d_world = d_local @ sensor.R.T
    origins = np.broadcast_to(sensor.translation, d_world.shape)
    ranges = _intersect(world, origins, d_world, rig.max_range, sensor.translation, 0.0)
    t_end = pose.timestamp or 0.0
    col_t = t_end - rig.period + (np.arange(cols) + 1) * rig.period / cols
    times = np.repeat(col_t, rig.channels)
    return _finish(ranges, d_local, times, rig, rng)


def raycast_sweep(world: World, trajectory, t_end: float, rig: SensorRig = SensorRig(), rng=None) -> PointCloud:
    """Rotating-sensor scan ending at ``t_end``: each column is fired from the pose
    at its own time, and points are expressed in the LiDAR frame of that time."""
    d_local = rig.beam_directions()
    cols = d_local.shape[0]
    col_t = t_end - rig.period + (np.arange(cols) + 1) * rig.period / cols
    pos, _, _, _, _ = trajectory.state(col_t)
    Rb = trajectory.rotation_matrices(col_t)
    Re = rig.extrinsic.R
    Rs = Rb @ Re
    origins = pos + Rb @ rig.extrinsic.translation
    d_world = np.einsum("cij,ckj->cki", Rs, d_local)
    o_rays = np.repeat(origins, rig.channels, axis=0)
    centre = origins.mean(axis=0)
    reach = float(np.max(np.linalg.norm(origins - centre, axis=1)))
    ranges = _intersect(world, o_rays, d_world.reshape(-1, 3), rig.max_range, centre, reach)
    times = np.repeat(col_t, rig.channels)
    return _finish(ranges, d_local.reshape(-1, 3), times, rig, rng)


def synthesize_imu(trajectory, rig: SensorRig = SensorRig(), rng=None,
                   t_start=None, t_end=None, gravity=GRAVITY) -> ImuSeries:
    """Body-frame angular rate and specific force sampled at the IMU rate."""
    t0 = trajectory.start_time if t_start is None else t_start
    t1 = trajectory.end_time if t_end is None else t_end
    dt = 1.0 / rig.imu_rate
    n = int(np.floor((t1 - t0) / dt + 1e-9)) + 1
    times = t0 + np.arange(n) * dt
    _, _, acc, _, yaw_rate = trajectory.state(times)
    R = trajectory.rotation_matrices(times)
    gyro = np.zeros((n, 3))
    gyro[:, 2] = yaw_rate
    accel = np.einsum("nji,nj->ni", R, acc - np.asarray(gravity, dtype=float))
    if rng is not None:
        bg = np.asarray(rig.gyro_bias, dtype=float) + np.cumsum(
            rng.normal(0.0, rig.gyro_bias_walk * np.sqrt(dt), size=(n, 3)), axis=0)
        ba = np.asarray(rig.accel_bias, dtype=float) + np.cumsum(
            rng.normal(0.0, rig.accel_bias_walk * np.sqrt(dt), size=(n, 3)), axis=0)
        gyro = gyro + bg + rng.normal(0.0, rig.gyro_noise / np.sqrt(dt), size=(n, 3))
        accel = accel + ba + rng.normal(0.0, rig.accel_noise / np.sqrt(dt), size=(n, 3))
    else:
        gyro = gyro + np.asarray(rig.gyro_bias, dtype=float)
        accel = accel + np.asarray(rig.accel_bias, dtype=float)
    return ImuSeries(times, gyro, accel)
