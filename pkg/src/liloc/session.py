"""Session stores, submap joining, prior association and scan-match propagation.

A session directory holds::

    poses.tum              keyframe poses
    keyframes/<id>.llpc    keyframe clouds, body frame
    submaps.idx            id, member ids, centroid, xy-boundary per submap
    graph.txt              factor graph dump at the end of the run
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree

from liloc.config import RunConfig
from liloc.factorgraph import SCAN_MATCH, BetweenFactor, pose_information, pose_key
from liloc.geometry import Pose
from liloc.odometry import Keyframe
from liloc.pointcloud import (
    DegenerateTargetError,
    KdTree3,
    NDTParams,
    PointCloud,
    fitness_score,
    ndt,
    voxel_downsample,
)
from liloc.pointcloud.io import read_llpc, write_llpc
from liloc.pointcloud.registration import build_voxel_gaussians
from liloc.trajectory_io import read_tum, write_tum

log = logging.getLogger(__name__)

RLM, ILM = "RLM", "ILM"


class SessionFormatError(ValueError):
    pass


@dataclass
class Submap:
    id: int
    members: Tuple[int, ...]
    cloud: PointCloud  # world frame
    centroid: np.ndarray
    boundary: Tuple[float, float, float, float]  # xmin, xmax, ymin, ymax

    def __post_init__(self):
        if not self.members:
            raise ValueError("a submap needs at least one keyframe")

    def format(self) -> str:
        ids = ",".join(str(m) for m in self.members)
        c = " ".join(f"{v:.9f}" for v in self.centroid)
        b = " ".join(f"{v:.9f}" for v in self.boundary)
        return f"{self.id} {ids} {c} {b}"


def merge_submap(submap_id: int, keyframes: Sequence[Keyframe], leaf: float, crop: float) -> Submap:
    """Union of the members' clouds in the world frame, each cropped horizontally to ``crop``."""
    parts = []
    for kf in keyframes:
        p = kf.cloud.points
        near = np.hypot(p[:, 0], p[:, 1]) <= crop
        parts.append(kf.pose.apply(p[near if np.any(near) else slice(None)]))
    cloud = voxel_downsample(PointCloud(np.vstack(parts)), leaf)
    xy = cloud.points[:, :2]
    boundary = (float(xy[:, 0].min()), float(xy[:, 0].max()), float(xy[:, 1].min()), float(xy[:, 1].max()))
    centroid = np.mean([kf.pose.translation for kf in keyframes], axis=0)
    return Submap(submap_id, tuple(kf.id for kf in keyframes), cloud, centroid, boundary)


@dataclass
class SessionStore:
    """Keyframes, their poses, the sealed submaps and the two lookup trees."""

    tag: str = "a"
    config: RunConfig = field(default_factory=RunConfig)
    keyframes: Dict[int, Keyframe] = field(default_factory=dict)
    submaps: List[Submap] = field(default_factory=list)
    pending: List[int] = field(default_factory=list)  # keyframes not yet sealed
    graph_dump: str = ""

    def __post_init__(self):
        self._tree_p: Optional[KdTree3] = None
        self._tree_m: Optional[KdTree3] = None
        self._grids: Dict[int, object] = {}
        self._kf_trees: Dict[int, cKDTree] = {}

    # --- contents ----------------------------------------------------------

    def add_keyframe(self, kf: Keyframe) -> None:
        if kf.id in self.keyframes:
            raise ValueError(f"keyframe {kf.id} already stored")
        self.keyframes[kf.id] = kf
        self.pending.append(kf.id)
        self._tree_p = None

    def keyframe(self, kid: int) -> Keyframe:
        return self.keyframes[kid]

    def poses(self) -> List[Pose]:
        return [self.keyframes[k].pose for k in sorted(self.keyframes)]

    def try_generate_submap(self) -> Optional[Submap]:
        """Seal the pending keyframes once there are N_s of them or they span h_p metres."""
        if not self.pending:
            return None
        first = self.keyframes[self.pending[0]].pose.translation
        last = self.keyframes[self.pending[-1]].pose.translation
        if len(self.pending) >= self.config.n_s or np.linalg.norm(last - first) >= self.config.h_p:
            return self.seal()
        return None

    def seal(self) -> Optional[Submap]:
        """Seal whatever is pending into a submap."""
        if not self.pending:
            return None
        sm = merge_submap(len(self.submaps), [self.keyframes[k] for k in self.pending],
                          self.config.submap_leaf, self.config.submap_crop)
        self.submaps.append(sm)
        self.pending = []
        self._tree_m = None
        log.debug("sealed submap %d with %d keyframes", sm.id, len(sm.members))
        return sm

    # --- lookup ---------------------------------------------------------------

    @property
    def tree_p(self) -> KdTree3:
        if self._tree_p is None:
            ids = sorted(self.keyframes)
            self._tree_p = KdTree3([self.keyframes[k].pose.translation for k in ids], ids)
        return self._tree_p

    @property
    def tree_m(self) -> KdTree3:
        if self._tree_m is None:
            self._tree_m = KdTree3([s.centroid for s in self.submaps], [s.id for s in self.submaps])
        return self._tree_m

    def nearest_submap(self, position, radius: float) -> Optional[Submap]:
        if not self.submaps:
            return None
        hit = self.tree_m.knn(position, 1)
        if not hit or hit[0][1] > radius:
            return None
        return self.submaps[hit[0][0]]

    def neighbors(self, position, k: int, radius: float = np.inf) -> List[int]:
        if not self.keyframes:
            return []
        return [i for i, d in self.tree_p.knn(position, k) if d <= radius]

    def ndt_grid(self, submap: Submap, params: NDTParams):
        if submap.id not in self._grids:
            self._grids[submap.id] = build_voxel_gaussians(submap.cloud, params)
        return self._grids[submap.id]

    def keyframe_tree(self, kid: int) -> cKDTree:
        """kd-tree over a keyframe's cloud in the world frame."""
        if kid not in self._kf_trees:
            kf = self.keyframes[kid]
            self._kf_trees[kid] = cKDTree(kf.pose.apply(kf.cloud.points))
        return self._kf_trees[kid]

    def copy(self) -> "SessionStore":
        """Staging copy: keyframes and submaps are shared, lists are not."""
        out = SessionStore(self.tag, self.config, dict(self.keyframes), list(self.submaps), list(self.pending))
        out._grids = self._grids
        out._kf_trees = self._kf_trees
        out.graph_dump = self.graph_dump
        return out

    # --- disk -------------------------------------------------------------------

    def save(self, directory) -> Path:
        out = Path(directory)
        (out / "keyframes").mkdir(parents=True, exist_ok=True)
        ids = sorted(self.keyframes)
        write_tum(out / "poses.tum", [self.keyframes[k].pose for k in ids])
        for k in ids:
            write_llpc(out / "keyframes" / f"{k:06d}.llpc", self.keyframes[k].cloud)
        with open(out / "submaps.idx", "w") as fh:
            fh.write("# id members cx cy cz xmin xmax ymin ymax\n")
            for sm in self.submaps:
                fh.write(sm.format() + "\n")
        (out / "graph.txt").write_text(self.graph_dump)
        return out

    @classmethod
    def load(cls, directory, config: Optional[RunConfig] = None, tag: str = "a") -> "SessionStore":
        d = Path(directory)
        config = config or RunConfig()
        for name in ("poses.tum", "submaps.idx"):
            if not (d / name).is_file():
                raise SessionFormatError(f"{d}: missing {name}")
        poses = read_tum(d / "poses.tum")
        files = sorted((d / "keyframes").glob("*.llpc"))
        if len(files) != len(poses) or not files:
            raise SessionFormatError(f"{d}: {len(files)} keyframe clouds for {len(poses)} poses")
        store = cls(tag, config)
        for f, pose in zip(files, poses):
            kid = int(f.stem)
            store.keyframes[kid] = Keyframe(kid, read_llpc(f), pose, pose.timestamp or 0.0)
        sealed = set()
        for n, line in enumerate((d / "submaps.idx").read_text().splitlines(), 1):
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 9:
                raise SessionFormatError(f"submaps.idx line {n}: expected 9 fields")
            try:
                members = [int(m) for m in parts[1].split(",")]
                sm = merge_submap(int(parts[0]), [store.keyframes[m] for m in members],
                                  config.submap_leaf, config.submap_crop)
            except (ValueError, KeyError) as exc:
                raise SessionFormatError(f"submaps.idx line {n}: {exc}") from exc
            store.submaps.append(sm)
            sealed.update(members)
        store.pending = [k for k in sorted(store.keyframes) if k not in sealed]
        gpath = d / "graph.txt"
        store.graph_dump = gpath.read_text() if gpath.is_file() else ""
        return store


# --- overlap and mode ------------------------------------------------------------


def compute_overlap(pose: Pose, submap: Submap, l: float) -> float:
    """Fraction of the square of half side ``l`` around the pose covered by the submap boundary."""
    if l <= 0:
        raise ValueError("overlap half side must be positive")
    x, y = pose.translation[:2]
    xmin, xmax, ymin, ymax = submap.boundary
    wx = max(0.0, min(x + l, xmax) - max(x - l, xmin))
    wy = max(0.0, min(y + l, ymax) - max(y - l, ymin))
    return float(wx * wy / (4.0 * l * l))


@dataclass
class ModeState:
    mode: str = ILM
    overlap: float = 0.0
    submap_id: Optional[int] = None

    def __post_init__(self):
        if self.mode not in (RLM, ILM):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == RLM and self.submap_id is None:
            raise ValueError("relocalization needs a prior submap")


def decide_mode(store: Optional[SessionStore], pose: Pose, config: RunConfig) -> Tuple[ModeState, Optional[Submap]]:
    """Relocalize iff the nearest prior submap covers at least h_o of the square around the pose."""
    submap = store.nearest_submap(pose.translation, config.submap_radius) if store is not None else None
    if submap is None:
        return ModeState(ILM, 0.0, None), None
    overlap = compute_overlap(pose, submap, config.overlap_l)
    rlm = overlap >= config.h_o
    if config.mode != "auto":
        rlm = config.mode == "rlm"
    if rlm:
        return ModeState(RLM, overlap, submap.id), submap
    return ModeState(ILM, overlap, None), None


def select_prior_submap(store: SessionStore, pose: Pose, config: RunConfig) -> Optional[Tuple[Submap, List[int]]]:
    submap = store.nearest_submap(pose.translation, config.submap_radius)
    if submap is None:
        return None
    nodes = store.neighbors(pose.translation, config.n_d, config.submap_radius)
    if not nodes:
        return None
    return submap, nodes


# --- propagation -------------------------------------------------------------------


@dataclass
class PropagatedFactors:
    factors: List[BetweenFactor]
    registered: Optional[Pose]  # T_r in the prior frame
    ndt_fitness: float
    fitness: List[float]


def scan_match_information(fitness: float, config: RunConfig) -> np.ndarray:
    base = pose_information(config.scan_match_sigma_t, config.scan_match_sigma_r)
    return base / max(fitness, config.fitness_floor)


def propagate_scan_match(scan: Keyframe, store: SessionStore, submap: Submap, neighbors: Sequence[int],
                         current: Pose, config: RunConfig, session: str = "b",
                         single_edge: bool = False) -> PropagatedFactors:
    """Register the keyframe to the submap and spread the result over the nearest prior nodes.

    Each neighbour i gets the edge (T_i)^-1 T_r with information scaled by
    the inverse of the scan's fitness against keyframe i. ``single_edge``
    keeps only the nearest neighbour (the direct A/B baseline).
    """
    if not neighbors:
        raise ValueError("propagation needs at least one prior node")
    params = NDTParams(resolution=config.ndt_resolution)
    src = voxel_downsample(scan.cloud, config.ndt_source_leaf)
    try:
        grid = store.ndt_grid(submap, params)
        res = ndt(src, submap.cloud, current, params, grid=grid)
    except DegenerateTargetError as exc:
        log.warning("scan match skipped: %s", exc)
        return PropagatedFactors([], None, float("nan"), [])
    if not res.converged or res.fitness > config.ndt_max_fitness:
        log.info("scan match rejected (converged=%s, fitness %.3f)", res.converged, res.fitness)
        return PropagatedFactors([], None, res.fitness, [])
    T_r = res.transform
    nodes = list(neighbors)[:1] if single_edge else list(neighbors)
    factors, fits = [], []
    for i in nodes:
        f, _ = fitness_score(scan.cloud, store.keyframe_tree(i), T_r)
        f = max(f, config.fitness_floor)
        rel = store.keyframe(i).pose.inverse().compose(T_r)
        factors.append(BetweenFactor(pose_key(store.tag, i), pose_key(session, scan.id), rel,
                                     scan_match_information(f, config), kind=SCAN_MATCH, fitness=f))
        fits.append(f)
    return PropagatedFactors(factors, T_r, res.fitness, fits)
