"""Polar occupancy descriptor, shift-minimized Hamming distance, and global pose initialization."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from liloc.geometry import Pose, Rotation
from liloc.odometry import align_scan
from liloc.pointcloud import ICPParams, IncrementalMapIndex, PointCloud, RegistrationResult, fitness_score, icp

log = logging.getLogger(__name__)

N_RINGS = 20
N_SECTORS = 60
L_MAX = 50.0
GROUND_OFFSET = -0.5  # occupancy needs a point above this height relative to the sensor


@dataclass(frozen=True)
class PolarDescriptor:
    """Ring x sector grid: max height (NaN when empty), occupancy bits, PCA normals."""

    max_z: np.ndarray
    occupancy: np.ndarray
    normals: np.ndarray
    l_max: float

    @property
    def shape(self) -> Tuple[int, int]:
        return self.occupancy.shape

    def shifted(self, k: int) -> "PolarDescriptor":
        return PolarDescriptor(
            np.roll(self.max_z, k, axis=1),
            np.roll(self.occupancy, k, axis=1),
            np.roll(self.normals, k, axis=1),
            self.l_max,
        )


def cell_indices(points: np.ndarray, n_rings: int, n_sectors: int, l_max: float):
    """Ring and sector of each point plus the mask of points inside ``l_max``."""
    rho = np.hypot(points[:, 0], points[:, 1])
    theta = np.mod(np.arctan2(points[:, 1], points[:, 0]), 2 * np.pi)
    keep = rho < l_max
    ring = np.minimum((rho * n_rings / l_max).astype(int), n_rings - 1)
    sector = np.minimum((theta * n_sectors / (2 * np.pi)).astype(int), n_sectors - 1)
    return ring[keep], sector[keep], keep


def encode(cloud: PointCloud, n_rings: int = N_RINGS, n_sectors: int = N_SECTORS, l_max: float = L_MAX,
           ground_offset: float = GROUND_OFFSET) -> PolarDescriptor:
    if n_rings < 1 or n_sectors < 1:
        raise ValueError("descriptor needs at least one ring and one sector")
    if l_max <= 0:
        raise ValueError("l_max must be positive")
    ring, sector, keep = cell_indices(cloud.points, n_rings, n_sectors, l_max)
    pts = cloud.points[keep]
    n_cells = n_rings * n_sectors
    cell = ring * n_sectors + sector

    max_z = np.full(n_cells, -np.inf)
    np.maximum.at(max_z, cell, pts[:, 2])
    occupancy = max_z > ground_offset
    max_z[np.isinf(max_z)] = np.nan

    count = np.bincount(cell, minlength=n_cells)
    s1 = np.zeros((n_cells, 3))
    np.add.at(s1, cell, pts)
    s2 = np.zeros((n_cells, 3, 3))
    np.add.at(s2, cell, pts[:, :, None] * pts[:, None, :])
    normals = np.full((n_cells, 3), np.nan)
    ok = count >= 3
    if np.any(ok):
        mean = s1[ok] / count[ok, None]
        cov = s2[ok] / count[ok, None, None] - mean[:, :, None] * mean[:, None, :]
        _, vecs = np.linalg.eigh(cov)
        n = vecs[:, :, 0]
        n *= np.where(n[:, 2] < 0, -1.0, 1.0)[:, None]
        normals[ok] = n
    return PolarDescriptor(
        max_z.reshape(n_rings, n_sectors),
        occupancy.reshape(n_rings, n_sectors),
        normals.reshape(n_rings, n_sectors, 3),
        float(l_max),
    )


def descriptor_distance(a: PolarDescriptor, b: PolarDescriptor) -> Tuple[int, int]:
    """Minimum Hamming distance over cyclic sector shifts and the shift achieving it.

    The shift ``s`` is the one for which ``a.shifted(s)`` best matches ``b``;
    the smallest such shift wins ties.
    """
    if a.shape != b.shape:
        raise ValueError(f"descriptor shapes differ: {a.shape} vs {b.shape}")
    n_sectors = a.shape[1]
    idx = (np.arange(n_sectors)[None, :] - np.arange(n_sectors)[:, None]) % n_sectors
    rolled = a.occupancy[:, idx]  # (rings, shift, sectors)
    dist = np.count_nonzero(rolled != b.occupancy[:, None, :], axis=(0, 2))
    s = int(np.argmin(dist))
    return int(dist[s]), s


def shift_to_yaw(shift: int, n_sectors: int) -> float:
    """Yaw of the query frame relative to the candidate frame for a descriptor shift."""
    yaw = -2 * np.pi * shift / n_sectors
    return math.remainder(yaw, 2 * np.pi)


class InitializationError(RuntimeError):
    def __init__(self, message: str, best: Optional["InitializationResult"] = None):
        super().__init__(message)
        self.best = best


@dataclass(frozen=True)
class InitializationResult:
    pose: Pose
    keyframe_id: int
    descriptor_distance: int
    fitness: float
    coarse_fitness: float
    shift: int


@dataclass(frozen=True)
class InitParams:
    n_rings: int = N_RINGS
    n_sectors: int = N_SECTORS
    l_max: float = L_MAX
    search_radius: float = 50.0
    correspondence_schedule: Sequence[float] = (4.0, 2.0, 1.0, 0.5)
    max_fitness: float = 0.25


def _refine(source: PointCloud, target: PointCloud, guess: Pose, params: InitParams):
    T = guess
    res = None
    for d in params.correspondence_schedule:
        res = icp(source, target, T, ICPParams(max_correspondence=d, max_iterations=60))
        T = res.transform
    return res


def _polish(source: PointCloud, target: PointCloud, res, params: InitParams):
    """Point-to-plane pass after ICP.

    Point-to-point matching of ground rings, which move with the sensor,
    biases translation toward the keyframe; planes do not carry that bias.
    """
    index = IncrementalMapIndex()
    index.insert(target.points)
    al = align_scan(source, res.transform, index)
    if not al.valid:
        return res
    fit, n = fitness_score(source, target, al.pose, params.correspondence_schedule[-1])
    return RegistrationResult(al.pose, fit, res.converged, res.iterations + al.iterations, n)


def initialize_pose(query: PointCloud, coarse: Pose, store, params: InitParams = InitParams()) -> InitializationResult:
    """Coarse-to-fine relocalization of a body-frame scan in a prior session.

    ``store`` provides ``nearest_submap(position, radius)`` returning an
    object with ``members`` (keyframe ids), and ``keyframe(id)`` returning an
    object with ``cloud`` (body frame) and ``pose``.
    """
    if len(query) == 0:
        raise InitializationError("query scan is empty")
    submap = store.nearest_submap(coarse.translation, params.search_radius)
    if submap is None:
        raise InitializationError(f"no prior submap within {params.search_radius} m of the coarse pose")
    q_desc = encode(query, params.n_rings, params.n_sectors, params.l_max)
    scored = []
    for kid in submap.members:
        kf = store.keyframe(kid)
        dist, shift = descriptor_distance(encode(kf.cloud, params.n_rings, params.n_sectors, params.l_max), q_desc)
        gap = float(np.linalg.norm(kf.pose.translation - coarse.translation))
        scored.append((dist, gap, kid, shift))
    scored.sort()
    dist, _, kid, shift = scored[0]
    kf = store.keyframe(kid)
    coarse_rel = kf.pose.inverse().compose(coarse)
    coarse_fit, _ = fitness_score(query, kf.cloud, coarse_rel, params.correspondence_schedule[-1])

    # yaw from the descriptor shift, translated either to the keyframe or to the coarse offset
    yaw = Rotation.yaw(shift_to_yaw(shift, params.n_sectors))
    guesses = [Pose(yaw, np.zeros(3)), Pose(yaw, coarse_rel.translation), coarse_rel]
    best = None
    for g in guesses:
        res = _refine(query, kf.cloud, g, params)
        if best is None or res.fitness < best.fitness:
            best = res
    best = _polish(query, kf.cloud, best, params)
    rel, fit = best.transform, best.fitness
    if coarse_fit < fit:
        rel, fit = coarse_rel, coarse_fit
    result = InitializationResult(kf.pose.compose(rel).with_timestamp(coarse.timestamp), kid, dist, fit, coarse_fit, shift)
    if not best.converged or fit > params.max_fitness:
        raise InitializationError(
            f"refinement against keyframe {kid} failed (fitness {fit:.4f}, converged={best.converged})", result
        )
    log.info("initialized on keyframe %d: distance %d, shift %d, fitness %.4f", kid, dist, shift, fit)
    return result
