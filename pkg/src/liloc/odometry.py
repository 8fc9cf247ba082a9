"""LiDAR odometry front-end: undistortion, point-to-plane alignment and keyframing."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from scipy.spatial.transform import Rotation as SciRotation

from liloc.geometry import Pose, Rotation, so3_exp, so3_log
from liloc.imu import ImuSeries, integrate
from liloc.pointcloud import IncrementalMapIndex, PointCloud, voxel_downsample
from liloc.pointcloud.cloud import voxel_keys

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Keyframe:
    id: int
    cloud: PointCloud  # downsampled, body frame
    pose: Pose
    timestamp: float

    def __post_init__(self):
        if len(self.cloud) == 0:
            raise ValueError("keyframe cloud must not be empty")


@dataclass(frozen=True)
class OdometryFactor:
    from_id: int
    to_id: int
    relative: Pose
    information: np.ndarray


@dataclass(frozen=True)
class AlignParams:
    neighbors: int = 5
    plane_tolerance: float = 0.2  # every patch point within this distance of its plane
    roughness_scale: float = 0.05  # weight = exp(-rms / scale)
    max_neighbor_distance: float = 1.0
    max_residual: float = 1.0
    min_spread: float = 0.0  # > 0 rejects collinear patches (a single scan line)
    max_iterations: int = 30
    tolerance: float = 1e-6
    min_correspondences: int = 10
    degeneracy_ratio: float = 1e-6
    damping: float = 1e-9


@dataclass(frozen=True)
class AlignResult:
    pose: Pose
    valid: bool
    rank_deficient: bool
    iterations: int
    correspondences: int
    rms: float


def plane_patches(neighbors: np.ndarray):
    """Least-squares planes of (m, k, 3) patches.

    Returns normals, centroids, rms and max point-to-plane distance, and the
    in-plane spread along the weaker axis (near zero for collinear patches).
    """
    k = neighbors.shape[1]
    c = neighbors.mean(axis=1)
    d = neighbors - c[:, None, :]
    cov = np.einsum("mki,mkj->mij", d, d)
    vals, vecs = np.linalg.eigh(cov)
    n = vecs[:, :, 0]
    dist = np.abs(np.einsum("mki,mi->mk", d, n))
    spread = np.sqrt(np.maximum(vals[:, 1], 0.0) / k)
    return n, c, np.sqrt(np.mean(dist**2, axis=1)), dist.max(axis=1), spread


def _correspondences(points: np.ndarray, pose: Pose, index: IncrementalMapIndex, p: AlignParams):
    q = pose.apply(points)
    nb, d = index.neighbors(q, p.neighbors)
    ok = np.all(np.isfinite(d), axis=1) & (d[:, -1] <= p.max_neighbor_distance)
    n, c, rms, worst, spread = plane_patches(nb[ok])
    e = np.einsum("mi,mi->m", q[ok] - c, n)
    keep = (worst <= p.plane_tolerance) & (np.abs(e) <= p.max_residual) & (spread >= p.min_spread)
    idx = np.flatnonzero(ok)[keep]
    w = np.exp(-rms[keep] / p.roughness_scale)
    return idx, n[keep], e[keep], w


def align_scan(scan: PointCloud, predicted: Pose, index: IncrementalMapIndex,
               params: AlignParams = AlignParams()) -> AlignResult:
    """Weighted point-to-plane alignment of a body-frame scan against the map.

    Directions whose information falls below ``degeneracy_ratio`` of the
    strongest are left at the prediction and reported as rank deficiency.
    """
    if len(index) < params.neighbors or len(scan) == 0:
        return AlignResult(predicted, False, False, 0, 0, float("nan"))
    pts = scan.points
    T = predicted
    deficient = False
    it = 0
    n_corr = 0
    rms = float("nan")
    for it in range(1, params.max_iterations + 1):
        idx, n, e, w = _correspondences(pts, T, index, params)
        n_corr = len(idx)
        if n_corr < params.min_correspondences:
            log.warning("alignment: %d plane correspondences, keeping prediction", n_corr)
            return AlignResult(predicted, False, deficient, it, n_corr, float("nan"))
        rms = float(np.sqrt(np.sum(w * e**2) / np.sum(w)))
        nb = n @ T.R  # normals in the body frame
        J = np.c_[np.cross(pts[idx], nb), n]
        H = (J * w[:, None]).T @ J
        g = (J * w[:, None]).T @ e
        vals, vecs = np.linalg.eigh(H)
        good = vals > params.degeneracy_ratio * vals[-1]
        deficient = deficient or not np.all(good)
        inv = np.where(good, 1.0 / (vals + params.damping * vals[-1]), 0.0)
        delta = -vecs @ (inv * (vecs.T @ g))
        T = Pose(Rotation.from_matrix(T.R @ so3_exp(delta[:3])), T.translation + delta[3:], predicted.timestamp)
        if np.linalg.norm(delta) < params.tolerance:
            break
    return AlignResult(T, True, deficient, it, n_corr, rms)


def undistort(scan: PointCloud, imu: Optional[ImuSeries], scan_end: float,
              velocity: np.ndarray = np.zeros(3)) -> Tuple[PointCloud, bool]:
    """Express every point in the scan-end frame.

    Rotation comes from the gyro integrated over the sweep and is applied by
    linear interpolation in time; translation assumes constant body-frame
    velocity. Returns the input unchanged and ``False`` without point times.
    """
    if scan.times is None or len(scan) == 0:
        if len(scan):
            log.warning("scan has no per-point times; skipping undistortion")
        return scan, False
    t0 = float(scan.times.min())
    span = scan_end - t0
    if span <= 0:
        return scan, True
    phi = np.zeros(3)
    if imu is not None and len(imu.times) and imu.times[0] <= t0 and imu.times[-1] >= scan_end:
        phi = so3_log(integrate(imu.segment(t0, scan_end)).delta_R)
    lag = scan_end - scan.times  # time from capture to scan end
    frac = lag / span
    # pose of the capture frame in the scan-end frame: rotation Exp(-frac*phi), offset -v*lag
    pts = scan.points
    if np.any(phi):
        pts = SciRotation.from_rotvec(-frac[:, None] * phi).apply(pts)
    pts = pts - np.outer(lag, velocity)
    return PointCloud(pts, scan.intensity, None), True


def maybe_keyframe(pose: Pose, last: Optional[Pose], translation: float = 1.0, rotation: float = 0.2) -> bool:
    if last is None:
        return True
    rel = last.inverse().compose(pose)
    return bool(np.linalg.norm(rel.translation) >= translation or rel.rotation.angle() >= rotation)


ODOMETRY_SIGMA = (0.05, 0.01)  # translation m, rotation rad


def emit_between(prev: Keyframe, curr: Keyframe, rms: float = 0.0, reference_rms: float = 0.05,
                 sigma=ODOMETRY_SIGMA) -> OdometryFactor:
    """Relative pose prev^-1 * curr with diagonal noise inflated by a poor alignment rms."""
    scale = 1.0 if not np.isfinite(rms) else float(np.clip(rms / reference_rms, 1.0, 10.0))
    st, sr = sigma[0] * scale, sigma[1] * scale
    info = np.diag([1 / sr**2] * 3 + [1 / st**2] * 3)
    return OdometryFactor(prev.id, curr.id, prev.pose.inverse().compose(curr.pose), info)


@dataclass(frozen=True)
class FrontendParams:
    source_leaf: float = 0.6
    map_leaf: float = 0.4
    keyframe_translation: float = 1.0
    keyframe_rotation: float = 0.2
    align: AlignParams = AlignParams()
    undistort: bool = True
    odometry_sigma: Tuple[float, float] = ODOMETRY_SIGMA


@dataclass
class FrontendOutput:
    pose: Pose
    valid: bool
    keyframe: Optional[Keyframe]
    factor: Optional[OdometryFactor]
    rank_deficient: bool
    rms: float


@dataclass
class LidarOdometry:
    """Sequential scan-to-map odometry; emits keyframes and between factors."""

    initial: Pose
    imu: Optional[ImuSeries] = None
    extrinsic: Pose = field(default_factory=Pose.identity)
    params: FrontendParams = FrontendParams()

    def __post_init__(self):
        self.index = IncrementalMapIndex(rebuild_every=20)
        self._voxels = np.zeros(0, dtype=np.int64)
        self.keyframes: List[Keyframe] = []
        self.pose: Optional[Pose] = None
        self.time: Optional[float] = None
        self.velocity = np.zeros(3)  # world frame
        self._kf_rms = 0.0

    def _predict(self, t: float) -> Pose:
        if self.pose is None:
            return self.initial
        dt = t - self.time
        R = self.pose.R
        if self.imu is not None and self.imu.times[0] <= self.time and self.imu.times[-1] >= t:
            R = R @ integrate(self.imu.segment(self.time, t)).delta_R
        return Pose(Rotation.from_matrix(R), self.pose.translation + self.velocity * dt, t)

    def process(self, scan: PointCloud, t: float) -> FrontendOutput:
        pred = self._predict(t)
        body = scan.transformed(self.extrinsic)
        if self.params.undistort:
            v_body = pred.R.T @ self.velocity
            body, _ = undistort(body, self.imu, t, v_body)
        src = voxel_downsample(body.without_times(), self.params.source_leaf)
        if len(self.index) == 0:
            res = AlignResult(pred, True, False, 0, len(src), 0.0)
        else:
            res = align_scan(src, pred, self.index, self.params.align)
        pose = res.pose.with_timestamp(t)
        if self.pose is not None and t > self.time:
            self.velocity = (pose.translation - self.pose.translation) / (t - self.time)
        self.pose, self.time = pose, t
        kf = fac = None
        last = self.keyframes[-1].pose if self.keyframes else None
        if maybe_keyframe(pose, last, self.params.keyframe_translation, self.params.keyframe_rotation):
            cloud = voxel_downsample(body.without_times(), self.params.map_leaf)
            kf = Keyframe(len(self.keyframes), cloud, pose, t)
            if self.keyframes:
                fac = emit_between(self.keyframes[-1], kf, res.rms, sigma=self.params.odometry_sigma)
            self.keyframes.append(kf)
            self._insert(pose.apply(cloud.points))
        return FrontendOutput(pose, res.valid, kf, fac, res.rank_deficient, res.rms)

    def _insert(self, world_points: np.ndarray) -> None:
        """Add points that fall in map voxels not yet occupied."""
        key = voxel_keys(world_points, self.params.map_leaf) + (1 << 20)
        code = (key[:, 0] << 42) | (key[:, 1] << 21) | key[:, 2]
        code, first = np.unique(code, return_index=True)
        fresh = ~np.isin(code, self._voxels, assume_unique=True)
        if np.any(fresh):
            self.index.insert(world_points[np.sort(first[fresh])])
            self._voxels = np.union1d(self._voxels, code[fresh])
