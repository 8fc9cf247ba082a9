"""Simulated recording sessions and their on-disk raw layout.

A raw session directory holds::

    scans.txt            index and end-of-sweep timestamp per scan
    scans/<index>.llpc   LiDAR sweep, LiDAR frame
    scans/<index>.times  per-point capture times (float64)
    imu.csv              t,wx,wy,wz,ax,ay,az
    ground_truth.tum     body pose at every scan time
    scenario.cfg         key = value description of the generator
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from liloc.geometry import Pose
from liloc.imu import ImuSeries
from liloc.pointcloud.cloud import PointCloud
from liloc.pointcloud.io import read_scan, read_times, write_scan, write_times
from liloc.simulator.sensors import SensorRig, raycast_sweep, synthesize_imu
from liloc.simulator.trajectory import Trajectory
from liloc.simulator.world import World, generate_world
from liloc.trajectory_io import read_tum, write_tum


class SessionFormatError(ValueError):
    pass


@dataclass
class SimulatedSession:
    """Lazily raycast session: scans are produced on demand and memoized."""

    world: World
    trajectory: Trajectory
    rig: SensorRig
    seed: int
    name: str = "session"
    cache: bool = True
    _scans: Dict[int, PointCloud] = field(default_factory=dict, repr=False)
    _imu: Optional[ImuSeries] = field(default=None, repr=False)

    @property
    def scan_times(self) -> np.ndarray:
        t0 = self.trajectory.start_time + self.rig.period
        n = int(np.floor((self.trajectory.end_time - t0) / self.rig.period + 1e-9)) + 1
        return t0 + np.arange(n) * self.rig.period

    def __len__(self) -> int:
        return len(self.scan_times)

    def scan(self, i: int) -> PointCloud:
        if i in self._scans:
            return self._scans[i]
        rng = np.random.default_rng([self.seed, 1, i])
        cloud = raycast_sweep(self.world, self.trajectory, float(self.scan_times[i]), self.rig, rng)
        if self.cache:
            self._scans[i] = cloud
        return cloud

    @property
    def imu(self) -> ImuSeries:
        if self._imu is None:
            rng = np.random.default_rng([self.seed, 2])
            self._imu = synthesize_imu(self.trajectory, self.rig, rng)
        return self._imu

    def ground_truth(self, times=None) -> List[Pose]:
        times = self.scan_times if times is None else np.atleast_1d(times)
        return self.trajectory.poses(times)

    def write(self, directory, scenario: str = "custom", route: str = "", limit: Optional[int] = None) -> Path:
        """Write the raw layout; ``limit`` keeps only the first scans."""
        out = Path(directory)
        (out / "scans").mkdir(parents=True, exist_ok=True)
        times = self.scan_times[:limit]
        with open(out / "scans.txt", "w") as fh:
            for i, t in enumerate(times):
                fh.write(f"{i:06d} {t:.6f}\n")
        for i in range(len(times)):
            cloud = self.scan(i)
            write_scan(out / "scans" / f"{i:06d}.llpc", cloud)
            write_times(out / "scans" / f"{i:06d}.times", cloud.times)
        self.imu.write_csv(out / "imu.csv")
        write_tum(out / "ground_truth.tum", self.ground_truth(times))
        with open(out / "scenario.cfg", "w") as fh:
            fh.write(f"scenario = {scenario}\nroute = {route}\nseed = {self.seed}\nname = {self.name}\n")
        return out


class RecordedSession:
    """A raw session read back from disk; same reading interface as ``SimulatedSession``."""

    def __init__(self, directory):
        self.directory = Path(directory)
        index = self.directory / "scans.txt"
        if not index.is_file():
            raise SessionFormatError(f"{self.directory}: missing scans.txt")
        rows = [ln.split() for ln in index.read_text().splitlines() if ln.strip() and not ln.startswith("#")]
        if not rows:
            raise SessionFormatError(f"{self.directory}: no scans listed")
        try:
            self._names = [r[0] for r in rows]
            self._times = np.array([float(r[1]) for r in rows])
        except (IndexError, ValueError) as exc:
            raise SessionFormatError(f"{index}: malformed line") from exc
        imu_path = self.directory / "imu.csv"
        if not imu_path.is_file():
            raise SessionFormatError(f"{self.directory}: missing imu.csv")
        self.imu = ImuSeries.read_csv(imu_path)
        gt = self.directory / "ground_truth.tum"
        self._gt = read_tum(gt) if gt.is_file() else None
        self.name = self.directory.name

    @property
    def scan_times(self) -> np.ndarray:
        return self._times

    def __len__(self) -> int:
        return len(self._times)

    def scan(self, i: int) -> PointCloud:
        base = self.directory / "scans" / self._names[i]
        cloud = read_scan(base.with_suffix(".llpc"))
        tpath = base.with_suffix(".times")
        if tpath.is_file():
            cloud = PointCloud(cloud.points, times=read_times(tpath))
        return cloud

    def ground_truth(self, times=None) -> Optional[List[Pose]]:
        return self._gt


# which routes play the central and subsidiary roles in each scenario
SCENARIO_ROUTES = {
    "corridor": ("main", "main"),
    "campus-loop": ("loop", "loop_extension"),
    "two-session-overlap": ("session_a", "session_b"),
}


def simulate(scenario: str, seed: int = 0, role: str = "central", rig: Optional[SensorRig] = None,
             speed: float = 4.0, world: Optional[World] = None) -> SimulatedSession:
    """Build the central or subsidiary session of a built-in scenario."""
    world = world or generate_world(seed, scenario)
    central, subsidiary = SCENARIO_ROUTES[scenario]
    route = central if role == "central" else subsidiary
    traj = Trajectory.from_route(world.routes[route], speed=speed)
    # the two roles draw independent sensor noise
    sensor_seed = seed * 2 + (0 if role == "central" else 1)
    return SimulatedSession(world, traj, rig or SensorRig(), sensor_seed, name=f"{scenario}-{role}")
