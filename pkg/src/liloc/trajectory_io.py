"""TUM trajectory files: ``timestamp tx ty tz qx qy qz qw`` per line."""

from __future__ import annotations

from pathlib import Path
from typing import Iterable, List

import numpy as np

from liloc.geometry import Pose, Rotation


class TrajectoryFormatError(ValueError):
    pass


def format_tum_line(pose: Pose) -> str:
    w, x, y, z = pose.rotation.quat
    t = pose.translation
    ts = 0.0 if pose.timestamp is None else pose.timestamp
    return f"{ts:.6f} {t[0]:.9f} {t[1]:.9f} {t[2]:.9f} {x:.9f} {y:.9f} {z:.9f} {w:.9f}"


def write_tum(path, poses: Iterable[Pose]) -> None:
    with open(path, "w") as fh:
        fh.write("# timestamp tx ty tz qx qy qz qw\n")
        for p in poses:
            fh.write(format_tum_line(p) + "\n")


def read_tum(path) -> List[Pose]:
    out: List[Pose] = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.replace(",", " ").split()
        if len(parts) != 8:
            raise TrajectoryFormatError(f"{path}:{n}: expected 8 fields, got {len(parts)}")
        try:
            v = np.array([float(x) for x in parts])
        except ValueError as exc:
            raise TrajectoryFormatError(f"{path}:{n}: non-numeric field") from exc
        q = np.array([v[7], v[4], v[5], v[6]])
        norm = np.linalg.norm(q)
        if not np.isfinite(norm) or norm < 1e-9:
            raise TrajectoryFormatError(f"{path}:{n}: invalid quaternion")
        out.append(Pose(Rotation(q / norm), v[1:4], float(v[0])))
    return out
