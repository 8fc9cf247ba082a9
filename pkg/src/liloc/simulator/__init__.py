from liloc.simulator.dataset import RecordedSession, SCENARIO_ROUTES, SimulatedSession, simulate
from liloc.simulator.sensors import SensorRig, raycast_scan, raycast_sweep, synthesize_imu
from liloc.simulator.trajectory import StaticTrajectory, Trajectory
from liloc.simulator.world import SCENARIOS, Patch, UnknownScenarioError, World, generate_world, region_area

__all__ = [
    "Patch",
    "World",
    "SCENARIOS",
    "UnknownScenarioError",
    "generate_world",
    "region_area",
    "Trajectory",
    "StaticTrajectory",
    "SensorRig",
    "raycast_scan",
    "raycast_sweep",
    "synthesize_imu",
    "SimulatedSession",
    "RecordedSession",
    "SCENARIO_ROUTES",
    "simulate",
]
