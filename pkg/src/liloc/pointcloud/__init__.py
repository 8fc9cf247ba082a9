from liloc.pointcloud.cloud import PointCloud, random_subsample, range_filter, voxel_downsample
from liloc.pointcloud.io import read_scan, write_scan
from liloc.pointcloud.registration import (
    DegenerateTargetError,
    ICPParams,
    NDTParams,
    RegistrationError,
    RegistrationResult,
    fitness_score,
    icp,
    ndt,
)
from liloc.pointcloud.spatial import IncrementalMapIndex, KdTree3, knn

__all__ = [
    "PointCloud",
    "voxel_downsample",
    "random_subsample",
    "range_filter",
    "read_scan",
    "write_scan",
    "KdTree3",
    "IncrementalMapIndex",
    "knn",
    "ICPParams",
    "NDTParams",
    "RegistrationResult",
    "RegistrationError",
    "DegenerateTargetError",
    "fitness_score",
    "icp",
    "ndt",
]
