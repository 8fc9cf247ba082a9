"""Scan registration: point-to-point ICP and the Normal Distributions Transform.

Both return a ``RegistrationResult`` whose ``fitness`` is the mean squared
distance from each transformed source point to its nearest target point,
over the pairs closer than the correspondence limit. Lower is better.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from liloc.geometry import Pose, Rotation, so3_exp
from liloc.pointcloud.cloud import PointCloud, voxel_keys

log = logging.getLogger(__name__)


class RegistrationError(RuntimeError):
    pass


class DegenerateTargetError(RegistrationError):
    """Target cloud cannot support a 6-DoF registration."""


@dataclass(frozen=True)
class RegistrationResult:
    transform: Pose
    fitness: float
    converged: bool
    iterations: int
    inliers: int = 0

    def __post_init__(self):
        if not self.fitness >= 0.0:
            raise ValueError("fitness must be non-negative")


@dataclass(frozen=True)
class ICPParams:
    max_correspondence: float = 1.0
    max_iterations: int = 50
    tolerance: float = 1e-6
    min_correspondences: int = 3


@dataclass(frozen=True)
class NDTParams:
    resolution: float = 1.0
    eigen_floor: float = 1e-3
    min_points_per_voxel: int = 6
    max_iterations: int = 50
    tolerance: float = 1e-6
    # extra isotropic variance, as a fraction of the resolution, per annealing stage
    inflation_schedule: Sequence[float] = (0.5, 0.25, 0.1, 0.0)
    neighbor_voxels: int = 3
    max_correspondence: float = 1.0


def _target_tree(target) -> cKDTree:
    if isinstance(target, cKDTree):
        return target
    return cKDTree(target.points)


def fitness_score(
    source: PointCloud, target, transform: Pose, max_distance: float = 1.0
) -> tuple[float, int]:
    """Mean squared nearest-neighbour distance of inliers, and the inlier count.

    With no inliers the score is ``max_distance**2``, the worst value an
    inlier could take.
    """
    tree = _target_tree(target)
    moved = transform.apply(source.points)
    d, _ = tree.query(moved, distance_upper_bound=max_distance)
    inl = np.isfinite(d)
    n = int(inl.sum())
    if n == 0:
        return float(max_distance**2), 0
    return float(np.mean(d[inl] ** 2)), n


def best_fit_transform(src: np.ndarray, dst: np.ndarray) -> Pose:
    """Closed-form rigid alignment (Kabsch/Umeyama without scale): dst ~ R src + t."""
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    H = (src - mu_s).T @ (dst - mu_d)
    U, _, Vt = np.linalg.svd(H)
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0
    R = Vt.T @ D @ U.T
    return Pose(Rotation.from_matrix(R), mu_d - R @ mu_s)


def icp(
    source: PointCloud,
    target: PointCloud,
    initial: Optional[Pose] = None,
    params: ICPParams = ICPParams(),
    target_tree: Optional[cKDTree] = None,
) -> RegistrationResult:
    """Point-to-point ICP estimating the pose that maps ``source`` onto ``target``."""
    if len(source) == 0 or len(target) == 0:
        raise ValueError("icp needs non-empty clouds")
    initial = initial or Pose.identity()
    tree = target_tree if target_tree is not None else cKDTree(target.points)
    src = source.points
    T = initial
    best = (np.inf, T, 0)
    converged = False
    it = 0
    for it in range(1, params.max_iterations + 1):
        moved = T.apply(src)
        d, idx = tree.query(moved, distance_upper_bound=params.max_correspondence)
        inl = np.isfinite(d)
        n = int(inl.sum())
        if n < params.min_correspondences:
            if it == 1:
                fit, _ = fitness_score(source, tree, initial, params.max_correspondence)
                return RegistrationResult(initial, fit, False, 0, 0)
            break
        err = float(np.mean(d[inl] ** 2))
        if err < best[0]:
            best = (err, T, n)
        delta = best_fit_transform(moved[inl], target.points[idx[inl]])
        T = delta.compose(T)
        step = np.linalg.norm(delta.log().vector())
        if step < params.tolerance:
            converged = True
            break
    fit, n = fitness_score(source, tree, T, params.max_correspondence)
    if not converged and best[0] < fit:
        T = best[1]
        fit, n = fitness_score(source, tree, T, params.max_correspondence)
    return RegistrationResult(T, fit, converged, it, n)


@dataclass
class VoxelGaussians:
    means: np.ndarray
    covariances: np.ndarray
    counts: np.ndarray
    resolution: float

    def __len__(self):
        return self.means.shape[0]


def build_voxel_gaussians(target: PointCloud, params: NDTParams) -> VoxelGaussians:
    pts = target.points
    keys = voxel_keys(pts, params.resolution)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    keep = np.flatnonzero(counts >= params.min_points_per_voxel)
    if keep.size == 0:
        raise DegenerateTargetError(
            f"no voxel holds {params.min_points_per_voxel} or more target points"
        )
    nvox = counts.shape[0]
    sums = np.zeros((nvox, 3))
    np.add.at(sums, inverse, pts)
    means = sums / counts[:, None]
    centered = pts - means[inverse]
    outer = centered[:, :, None] * centered[:, None, :]
    cov = np.zeros((nvox, 3, 3))
    np.add.at(cov, inverse, outer)
    cov = cov[keep] / (counts[keep, None, None] - 1)
    means = means[keep]
    w, V = np.linalg.eigh(cov)
    floor = params.eigen_floor * w[:, 2:3]
    w = np.maximum(w, np.maximum(floor, 1e-12))
    cov = np.einsum("nij,nj,nkj->nik", V, w, V)
    return VoxelGaussians(means, cov, counts[keep], params.resolution)


def _check_target_rank(target: PointCloud) -> None:
    pts = target.points
    c = np.cov((pts - pts.mean(axis=0)).T)
    ev = np.linalg.eigvalsh(c)
    if ev[2] <= 0.0 or ev[0] < 1e-6 * ev[2]:
        raise DegenerateTargetError("target points are collinear or coplanar")


def _ndt_terms(src, T: Pose, grid: VoxelGaussians, tree: cKDTree, whiten, params, radius):
    """Whitened offsets to nearby voxel means, the whitening factors and point indices.

    ``whiten[v]`` is an upper-triangular ``W`` with ``W.T @ W`` equal to the
    inverse covariance of voxel ``v``, so ``|W q|^2`` is the Mahalanobis term.
    """
    moved = T.apply(src)
    k = min(params.neighbor_voxels, len(grid))
    d, idx = tree.query(moved, k=k, distance_upper_bound=radius)
    d = d.reshape(len(src), k)
    idx = idx.reshape(len(src), k)
    pi, ki = np.nonzero(np.isfinite(d))
    vox = idx[pi, ki]
    W = whiten[vox]
    e = np.einsum("nij,nj->ni", W, moved[pi] - grid.means[vox])
    return e, W, pi, moved


def _ndt_score(e) -> float:
    return float(np.sum(np.exp(-0.5 * np.einsum("ni,ni->n", e, e))))


def ndt(
    source: PointCloud,
    target: PointCloud,
    initial: Optional[Pose] = None,
    params: NDTParams = NDTParams(),
    grid: Optional[VoxelGaussians] = None,
    target_tree: Optional[cKDTree] = None,
) -> RegistrationResult:
    """Maximize the summed Gaussian likelihood of source points under the target voxels.

    Optimization anneals the voxel covariances: each stage adds
    ``(s * resolution)**2`` to every covariance, the last stage (s = 0) is
    the plain likelihood. Within a stage the score is raised by Gauss-Newton
    steps on the Gaussian-weighted Mahalanobis cost with backtracking.
    """
    if len(source) == 0:
        raise ValueError("ndt needs a non-empty source")
    if len(target) == 0:
        raise DegenerateTargetError("empty target")
    _check_target_rank(target)
    if grid is None:
        grid = build_voxel_gaussians(target, params)
    T = initial or Pose.identity()
    src = source.points
    mean_tree = cKDTree(grid.means)
    radius = 1.5 * params.resolution
    total_iters = 0
    converged = False
    schedule = list(params.inflation_schedule)
    for stage, s in enumerate(schedule):
        extra = (s * params.resolution) ** 2
        inv_covs = np.linalg.inv(grid.covariances + extra * np.eye(3))
        whiten = np.linalg.cholesky(inv_covs).transpose(0, 2, 1)
        stage_radius = radius + 3.0 * s * params.resolution
        # intermediate stages only need to land in the next stage's basin
        tol = params.tolerance if stage == len(schedule) - 1 else max(params.tolerance, 1e-3)
        converged = False
        terms = _ndt_terms(src, T, grid, mean_tree, whiten, params, stage_radius)
        for _ in range(params.max_iterations):
            total_iters += 1
            e, W, pi, moved = terms
            if e.shape[0] < 6:
                break
            w = np.exp(-0.5 * np.einsum("ni,ni->n", e, e))
            score = float(w.sum())
            # whitened d(moved)/d(delta) for T <- Exp(delta) * T, delta = [rot, trans]:
            # W @ [-[p]x, I], where row r of W [p]x is cross(W_r, p)
            J = np.empty((e.shape[0], 3, 6))
            J[:, :, :3] = -np.cross(W, moved[pi][:, None, :])
            J[:, :, 3:] = W
            sw = np.sqrt(w)
            Jw = (J * sw[:, None, None]).reshape(-1, 6)
            H = Jw.T @ Jw
            g = Jw.T @ (e * sw[:, None]).reshape(-1)
            H += 1e-9 * np.trace(H) / 6.0 * np.eye(6) + 1e-12 * np.eye(6)
            try:
                delta = -np.linalg.solve(H, g)
            except np.linalg.LinAlgError:
                break
            step = 1.0
            improved = False
            for _ls in range(8):
                cand = _left_update(T, step * delta)
                cand_terms = _ndt_terms(src, cand, grid, mean_tree, whiten, params, stage_radius)
                score2 = _ndt_score(cand_terms[0])
                if score2 >= score:
                    improved = True
                    break
                step *= 0.5
            if not improved:
                converged = True
                break
            T = cand
            terms = cand_terms
            if np.linalg.norm(step * delta) < tol:
                converged = True
                break
    tree = target_tree if target_tree is not None else cKDTree(target.points)
    fit, n = fitness_score(source, tree, T, params.max_correspondence)
    return RegistrationResult(T, fit, converged, total_iters, n)


def _left_update(T: Pose, delta: np.ndarray) -> Pose:
    R = so3_exp(delta[:3])
    return Pose(Rotation.from_matrix(R @ T.R), R @ T.translation + delta[3:])
