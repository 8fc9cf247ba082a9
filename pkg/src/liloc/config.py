"""Run configuration: a flat ``key = value`` text file over typed defaults."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Dict


class ConfigError(ValueError):
    pass


MODES = ("auto", "rlm", "ilm")


@dataclass(frozen=True)
class RunConfig:
    # submap joining
    n_s: int = 20  # max keyframes per submap
    h_p: float = 20.0  # translation that seals a submap, m
    # descriptor grid
    n_a: int = 60  # sectors
    n_r: int = 20  # rings
    l_max: float = 50.0  # m
    # prior association and scan matching
    n_d: int = 3  # prior nodes per registration
    submap_radius: float = 50.0  # m
    scan_match_sigma_t: float = 0.1  # m
    scan_match_sigma_r: float = 0.05  # rad
    fitness_floor: float = 1e-4  # m^2
    ndt_resolution: float = 1.0  # m
    ndt_source_leaf: float = 0.8  # m
    submap_leaf: float = 0.4  # m
    submap_crop: float = 15.0  # horizontal range kept from each keyframe when merging, m
    ndt_max_fitness: float = 0.25  # registrations scoring worse emit no factors, m^2
    # windows and mode switching
    n_m_r: int = 5  # retained keyframes in relocalization mode
    n_m_l: int = 10  # retained keyframes in incremental mode
    h_o: float = 0.7  # overlap threshold
    overlap_l: float = 10.0  # half side of the overlap square, m
    mode: str = "auto"
    immediate_update: bool = False
    ab_baseline: bool = False
    marginalize: bool = True
    # first-state priors and anchors
    velocity_sigma: float = 0.5  # m/s
    accel_bias_sigma: float = 1e-3  # calibrated unit at start-up
    gyro_bias_sigma: float = 1e-4
    prior_anchor_sigma: float = 1e-3  # translation and rotation
    active_anchor_sigma_t: float = 1.0  # m
    active_anchor_sigma_r: float = 0.01  # rad
    # front-end
    keyframe_translation: float = 1.0  # m
    keyframe_rotation: float = 0.2  # rad
    map_leaf: float = 0.4  # m
    source_leaf: float = 0.6  # m
    frontend_stride: int = 1
    odometry_sigma_t: float = 0.05  # m
    odometry_sigma_r: float = 0.01  # rad
    # inertial noise model
    gyro_noise: float = 1e-3
    accel_noise: float = 1e-2
    gyro_bias_walk: float = 1e-5
    accel_bias_walk: float = 1e-4
    # synthetic odometry drift for subsidiary sessions
    drift_scale: float = 0.0  # translation scale error
    drift_yaw: float = 0.0  # rad per m travelled
    # initialization
    init_sigma_xy: float = 2.0  # coarse pose perturbation in simulator runs, m
    init_sigma_yaw: float = 0.26  # rad
    seed: int = 0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.type in ("int", "float") and f.name not in ("seed", "drift_scale", "drift_yaw") and not v > 0:
                raise ConfigError(f"{f.name} must be positive, got {v}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.prior_anchor_sigma >= min(self.active_anchor_sigma_t, self.active_anchor_sigma_r):
            raise ConfigError("prior anchor noise must be smaller than the active anchor noise")

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        return cls().replace(**parse_pairs(text))

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_text(text)


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _convert(name: str, kind: str, raw: str):
    try:
        if kind == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {kind}") from None


def parse_pairs(text: str) -> Dict[str, object]:
    types = {f.name: f.type for f in fields(RunConfig)}
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {n}: unknown key {key!r}")
        out[key] = _convert(key, types[key], raw)
    return out
