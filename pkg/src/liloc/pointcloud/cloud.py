from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from liloc.geometry import Pose


@dataclass(frozen=True)
class PointCloud:
    """Points in meters, with optional per-point intensity and capture time."""

    points: np.ndarray
    intensity: Optional[np.ndarray] = None
    times: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        for name in ("intensity", "times"):
            value = getattr(self, name)
            if value is not None:
                arr = np.array(value, dtype=float).reshape(-1)
                if arr.shape[0] != pts.shape[0]:
                    raise ValueError(f"{name} length does not match point count")
                arr.setflags(write=False)
                object.__setattr__(self, name, arr)

    @classmethod
    def empty(cls) -> PointCloud:
        return cls(np.zeros((0, 3)))

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def size(self) -> int:
        return self.points.shape[0]

    def transformed(self, pose: Pose) -> PointCloud:
        return PointCloud(pose.apply(self.points), self.intensity, self.times)

    def select(self, mask_or_index) -> PointCloud:
        return PointCloud(
            self.points[mask_or_index],
            None if self.intensity is None else self.intensity[mask_or_index],
            None if self.times is None else self.times[mask_or_index],
        )

    def without_times(self) -> PointCloud:
        return PointCloud(self.points, self.intensity)

    @staticmethod
    def concatenate(clouds) -> PointCloud:
        clouds = [c for c in clouds if len(c)]
        if not clouds:
            return PointCloud.empty()
        return PointCloud(np.vstack([c.points for c in clouds]))


def voxel_keys(points: np.ndarray, leaf: float) -> np.ndarray:
    return np.floor(points / leaf).astype(np.int64)


def voxel_downsample(cloud: PointCloud, leaf: float) -> PointCloud:
    """Replace the points of every occupied voxel by their centroid.

    Output order follows the lexicographic order of voxel indices, so the
    result is independent of the input ordering.
    """
    if leaf <= 0:
        raise ValueError("leaf size must be positive")
    if len(cloud) == 0:
        return PointCloud.empty()
    keys = voxel_keys(cloud.points, leaf)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    sums = np.zeros((counts.shape[0], 3))
    np.add.at(sums, inverse, cloud.points)
    intensity = None
    if cloud.intensity is not None:
        intensity = np.bincount(inverse, weights=cloud.intensity) / counts
    return PointCloud(sums / counts[:, None], intensity)


def random_subsample(cloud: PointCloud, max_points: int, seed: int = 0) -> PointCloud:
    if len(cloud) <= max_points:
        return cloud
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(len(cloud), size=max_points, replace=False))
    return cloud.select(idx)


def range_filter(cloud: PointCloud, min_range: float = 0.0, max_range: float = np.inf) -> PointCloud:
    r = np.linalg.norm(cloud.points, axis=1)
    return cloud.select((r >= min_range) & (r <= max_range))
