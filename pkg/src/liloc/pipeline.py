"""Per-keyframe localization loop over the joint factor graph, and session drivers."""

from __future__ import annotations

import logging
import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from liloc.config import RunConfig
from liloc.descriptor import InitParams, InitializationResult, initialize_pose
from liloc.factorgraph import (
    ANCHOR,
    SCAN_MATCH,
    STATE_PRIOR,
    BetweenFactor,
    BiasWalkFactor,
    ImuFactor,
    JointGraph,
    Key,
    PriorFactor,
    SolverError,
    bias_key,
    bias_walk_information,
    diagonal_information,
    pose_information,
    pose_key,
    velocity_key,
)
from liloc.geometry import Pose, Rotation
from liloc.imu import ImuNoise, ImuSeries, NavState, integrate, predict
from liloc.odometry import AlignParams, FrontendParams, Keyframe, LidarOdometry
from liloc.pointcloud import voxel_downsample
from liloc.session import ILM, RLM, SessionStore, decide_mode, propagate_scan_match

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FrontendKeyframe:
    keyframe: Keyframe
    relative: Optional[Pose]  # from the previous keyframe, odometry frame
    information: Optional[np.ndarray]
    frontend_ms: float  # front-end time accumulated since the previous keyframe


def run_frontend(source, config: RunConfig, initial: Pose) -> List[FrontendKeyframe]:
    """LiDAR odometry over every ``frontend_stride``-th scan; returns the keyframes."""
    params = FrontendParams(
        source_leaf=config.source_leaf,
        map_leaf=config.map_leaf,
        keyframe_translation=config.keyframe_translation,
        keyframe_rotation=config.keyframe_rotation,
        align=AlignParams(),
        odometry_sigma=(config.odometry_sigma_t, config.odometry_sigma_r),
    )
    fe = LidarOdometry(initial, source.imu, params=params)
    times = source.scan_times
    out: List[FrontendKeyframe] = []
    spent = 0.0
    for i in range(0, len(times), config.frontend_stride):
        t0 = time.perf_counter()
        res = fe.process(source.scan(i), float(times[i]))
        spent += time.perf_counter() - t0
        if res.keyframe is None:
            continue
        rel = res.factor.relative if res.factor else None
        info = res.factor.information if res.factor else None
        out.append(FrontendKeyframe(res.keyframe, rel, info, 1e3 * spent))
        spent = 0.0
    return out


# odometry corruption of the drift scenario: 1 % scale error and 1 mrad of yaw per metre
DRIFT_SCENARIO = {"drift_scale": 0.01, "drift_yaw": 0.001}


def inject_drift(rel: Pose, scale: float, yaw_per_metre: float) -> Pose:
    """Corrupt a relative pose: translation scaled by 1 + scale, extra yaw proportional to distance."""
    if scale == 0.0 and yaw_per_metre == 0.0:
        return rel
    d = float(np.linalg.norm(rel.translation))
    R = rel.rotation.compose(Rotation.yaw(yaw_per_metre * d))
    return Pose(R, (1.0 + scale) * rel.translation, rel.timestamp)


@dataclass
class StepRecord:
    index: int
    timestamp: float
    mode: str
    overlap: float
    submap_id: Optional[int]
    window: int
    scan_match: int
    solver_ok: bool
    frontend_ms: float
    match_ms: float
    optimize_ms: float
    marginalize_ms: float


@dataclass
class Localizer:
    """Sliding-window estimator over one session, optionally coupled to a prior session.

    ``prior`` is the lookup store for relocalization; keyframes estimated
    in incremental mode are staged into a copy of it (or a fresh store).
    """

    config: RunConfig
    imu: Optional[ImuSeries] = None
    prior: Optional[SessionStore] = None
    session: str = "b"
    central: bool = False  # the session defines the global frame

    def __post_init__(self):
        c = self.config
        self.graph = JointGraph()
        self.staged = self.prior.copy() if self.prior is not None else SessionStore(self.session, c)
        self.states: List[int] = []
        self.times: Dict[int, float] = {}
        self.estimates: Dict[int, Pose] = {}  # pose right after each step
        self.final: Dict[int, Pose] = {}  # last estimate held before leaving the window
        self.records: List[StepRecord] = []
        self.added: Counter = Counter()
        self.solver_failures = 0
        self.mode = ILM
        self.noise = ImuNoise(c.gyro_noise, c.accel_noise, c.gyro_bias_walk, c.accel_bias_walk)
        self._staged_ids: Dict[int, int] = {}

    # --- helpers ----------------------------------------------------------------

    def _add(self, factor) -> None:
        self.graph.add_factor(factor)
        self.added[factor.kind] += 1

    def _keys(self, k: int) -> List[Key]:
        keys = [pose_key(self.session, k)]
        if self.imu is not None:
            keys += [velocity_key(self.session, k), bias_key(self.session, k)]
        return keys

    def _has_anchor(self, session: str) -> bool:
        return any(f.kind == ANCHOR and f.keys[0].session == session for f in self.graph.factors)

    def _prior_nodes(self) -> List[Key]:
        return [k for k in self.graph.values if k.session != self.session]

    def _ensure_prior_node(self, key: Key, store: SessionStore) -> None:
        if key in self.graph:
            return
        pose = store.keyframe(key.index).pose
        if self._has_anchor(key.session):
            self.graph.add_variable(key, pose)
            info = pose_information(self.config.prior_anchor_sigma, self.config.prior_anchor_sigma)
            self._add(PriorFactor(key, pose, info, kind=STATE_PRIOR))
        else:
            self.graph.add_anchor(key, pose, True, (self.config.prior_anchor_sigma,) * 2)
            self.added[ANCHOR] += 1

    def _window_target(self) -> int:
        return self.config.n_m_r if self.mode == RLM else self.config.n_m_l

    # --- the step -----------------------------------------------------------------

    def _add_state(self, fk: FrontendKeyframe) -> Pose:
        c = self.config
        kf = fk.keyframe
        k = kf.id
        P = pose_key(self.session, k)
        if not self.states:
            init = kf.pose
            sigma = ((c.prior_anchor_sigma,) * 2 if self.central
                     else (c.active_anchor_sigma_t, c.active_anchor_sigma_r))
            self.graph.add_anchor(P, init, self.central, sigma)
            self.added[ANCHOR] += 1
            if self.imu is not None:
                V, B = velocity_key(self.session, k), bias_key(self.session, k)
                self.graph.add_variable(V, np.zeros(3))
                self.graph.add_variable(B, np.zeros(6))
                self._add(PriorFactor(V, np.zeros(3), diagonal_information([c.velocity_sigma] * 3)))
                self._add(PriorFactor(B, np.zeros(6), diagonal_information(
                    [c.accel_bias_sigma] * 3 + [c.gyro_bias_sigma] * 3)))
            return init
        j = self.states[-1]
        Pj = pose_key(self.session, j)
        rel = inject_drift(fk.relative, c.drift_scale, c.drift_yaw)
        prev = self.graph.values[Pj]
        init = prev.compose(rel).with_timestamp(kf.timestamp)
        self.graph.add_variable(P, init)
        info = fk.information
        if info is None:
            info = pose_information(c.odometry_sigma_t, c.odometry_sigma_r)
        self._add(BetweenFactor(Pj, P, rel, info))
        if self.imu is not None:
            Vj, Bj = velocity_key(self.session, j), bias_key(self.session, j)
            V, B = velocity_key(self.session, k), bias_key(self.session, k)
            bias = self.graph.values[Bj]
            delta = integrate(self.imu.segment(self.times[j], kf.timestamp), bias[:3], bias[3:], noise=self.noise)
            nav = predict(NavState(prev, self.graph.values[Vj], bias[:3], bias[3:]), delta)
            self.graph.add_variable(V, nav.velocity)
            self.graph.add_variable(B, bias.copy())
            self._add(ImuFactor(Pj, Vj, Bj, P, V, delta))
            self._add(BiasWalkFactor(Bj, B, bias_walk_information(delta.dt, c.accel_bias_walk, c.gyro_bias_walk)))
        return init

    def step(self, fk: FrontendKeyframe) -> Pose:
        c = self.config
        kf = fk.keyframe
        k = kf.id
        if self.states and fk.relative is None:
            raise ValueError("keyframes after the first need a relative pose")
        init = self._add_state(fk)
        self.states.append(k)
        self.times[k] = kf.timestamp
        P = pose_key(self.session, k)

        # mode switching on the predicted pose
        lookup = self.staged if c.immediate_update else self.prior
        state, submap = decide_mode(lookup, init, c)
        previous_mode, self.mode = self.mode, state.mode
        t0 = time.perf_counter()
        n_match = 0
        if self.mode == RLM:
            if previous_mode == ILM:
                self.staged.seal()
            nodes = lookup.neighbors(init.translation, c.n_d, c.submap_radius)
            if nodes:
                prop = propagate_scan_match(kf, lookup, submap, nodes, init, c, self.session,
                                            single_edge=c.ab_baseline)
                for f in prop.factors:
                    self._ensure_prior_node(f.keys[0], lookup)
                self.graph.attach_scan_match(prop.factors)
                self.added[SCAN_MATCH] += len(prop.factors)
                n_match = len(prop.factors)
            self.graph.set_mode_weight(1)
        else:
            # prior nodes leave the graph; their scan-match information stays as a marginal prior
            nodes = self._prior_nodes()
            if nodes:
                self.graph.marginalize(nodes)
            self.graph.set_mode_weight(0)
        match_ms = 1e3 * (time.perf_counter() - t0)

        t0 = time.perf_counter()
        saved = dict(self.graph.values)
        ok = True
        try:
            self.graph.optimize()
        except SolverError as exc:
            log.error("keyframe %d: solver failed (%s); keeping the odometry pose", k, exc)
            self.graph.values = saved
            self.solver_failures += 1
            ok = False
        opt_ms = 1e3 * (time.perf_counter() - t0)
        pose = self.graph.values[P].with_timestamp(kf.timestamp)
        self.estimates[k] = pose

        if self.mode == ILM and not self.central:
            self._stage(kf, pose)

        t0 = time.perf_counter()
        self._marginalize()
        marg_ms = 1e3 * (time.perf_counter() - t0)
        self.records.append(StepRecord(k, kf.timestamp, self.mode, state.overlap, state.submap_id,
                                       len(self.states), n_match, ok, fk.frontend_ms, match_ms, opt_ms, marg_ms))
        return pose

    def _stage(self, kf: Keyframe, pose: Pose) -> None:
        sid = max(self.staged.keyframes, default=-1) + 1
        self._staged_ids[kf.id] = sid
        self.staged.add_keyframe(Keyframe(sid, kf.cloud, pose, kf.timestamp))
        self.staged.try_generate_submap()

    def _marginalize(self) -> None:
        if not self.config.marginalize:
            return
        keep = min(self._window_target(), len(self.states))
        old, self.states = self.states[:-keep], self.states[-keep:]
        if not old:
            return
        drop = []
        for k in old:
            self.final[k] = self.graph.values[pose_key(self.session, k)].with_timestamp(self.times[k])
            drop += self._keys(k)
        retained = {pose_key(self.session, k) for k in self.states}
        for key in self._prior_nodes():
            linked = {k for f in self.graph.factors_of(key) if f.kind == SCAN_MATCH for k in f.keys}
            if not linked & retained:
                drop.append(key)
        self.graph.marginalize(drop)

    def finish(self) -> None:
        for k in self.states:
            self.final[k] = self.graph.values[pose_key(self.session, k)].with_timestamp(self.times[k])
        if self.mode == ILM:
            self.staged.seal()

    # --- results --------------------------------------------------------------------

    def trajectory(self) -> List[Pose]:
        return [self.estimates[k] for k in sorted(self.estimates)]

    def final_trajectory(self) -> List[Pose]:
        return [self.final[k] for k in sorted(self.final)]


def run_backend(keyframes: Sequence[FrontendKeyframe], config: RunConfig, imu=None,
                prior: Optional[SessionStore] = None, session: str = "b", central: bool = False) -> Localizer:
    loc = Localizer(config, imu, prior, session, central)
    for fk in keyframes:
        loc.step(fk)
    loc.finish()
    return loc


def build_central(source, config: RunConfig, initial: Pose,
                  keyframes: Optional[Sequence[FrontendKeyframe]] = None):
    """Incremental-mode run that becomes the prior session; submaps come from the final poses."""
    config = config.replace(drift_scale=0.0, drift_yaw=0.0, mode="auto")
    if keyframes is None:
        keyframes = run_frontend(source, config, initial)
    loc = run_backend(keyframes, config, source.imu, None, "a", central=True)
    store = SessionStore("a", config)
    for fk in keyframes:
        kf = fk.keyframe
        store.add_keyframe(Keyframe(kf.id, kf.cloud, loc.final[kf.id], kf.timestamp))
        store.try_generate_submap()
    store.seal()
    store.graph_dump = loc.graph.dump()
    return store, loc


def initialize(source, store: SessionStore, coarse: Pose, config: RunConfig) -> InitializationResult:
    query = voxel_downsample(source.scan(0).without_times(), 0.2)
    params = InitParams(config.n_r, config.n_a, config.l_max, config.submap_radius)
    return initialize_pose(query, coarse.with_timestamp(float(source.scan_times[0])), store, params)


def coarse_guess(truth: Pose, config: RunConfig) -> Pose:
    """Seeded perturbation of the true start pose, as a stand-in for an operator's rough guess."""
    rng = np.random.default_rng([config.seed, 7])
    dx, dy = rng.normal(0.0, config.init_sigma_xy, 2)
    dyaw = float(rng.normal(0.0, config.init_sigma_yaw))
    return Pose(truth.rotation.compose(Rotation.yaw(dyaw)), truth.translation + [dx, dy, 0.0], truth.timestamp)


def localize(source, store: SessionStore, config: RunConfig, initial: Pose,
             keyframes: Optional[Sequence[FrontendKeyframe]] = None) -> Localizer:
    """Subsidiary run from an initialized pose."""
    if keyframes is None:
        keyframes = run_frontend(source, config, initial)
    return run_backend(keyframes, config, source.imu, store, "b", central=False)


def mode_timeline(records: Sequence[StepRecord]) -> List[tuple]:
    """Runs of equal mode as (mode, first index, last index)."""
    out = []
    for r in records:
        if out and out[-1][0] == r.mode:
            out[-1] = (r.mode, out[-1][1], r.index)
        else:
            out.append((r.mode, r.index, r.index))
    return out


def transitions(records: Sequence[StepRecord]) -> List[tuple]:
    return [(a.mode, b.mode, b.index) for a, b in zip(records, records[1:]) if a.mode != b.mode]


__all__ = [
    "DRIFT_SCENARIO",
    "FrontendKeyframe",
    "Localizer",
    "StepRecord",
    "build_central",
    "coarse_guess",
    "initialize",
    "inject_drift",
    "localize",
    "mode_timeline",
    "run_backend",
    "run_frontend",
    "transitions",
]
