"""Scan files: binary ``LLPC`` (magic, u32 count, count x 3 float32 LE) or CSV ``x,y,z``."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from liloc.pointcloud.cloud import PointCloud

MAGIC = b"LLPC"


class ScanFormatError(ValueError):
    pass


def write_llpc(path, cloud: PointCloud) -> None:
    path = Path(path)
    pts = np.ascontiguousarray(cloud.points, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", pts.shape[0]))
        fh.write(pts.tobytes())


def read_llpc(path) -> PointCloud:
    data = Path(path).read_bytes()
    if len(data) < 8 or data[:4] != MAGIC:
        raise ScanFormatError(f"{path}: missing LLPC header")
    (count,) = struct.unpack("<I", data[4:8])
    expected = 8 + 12 * count
    if len(data) != expected:
        raise ScanFormatError(f"{path}: expected {expected} bytes for {count} points, got {len(data)}")
    pts = np.frombuffer(data, dtype="<f4", offset=8, count=3 * count).reshape(count, 3)
    return PointCloud(pts.astype(float))


def write_csv(path, cloud: PointCloud) -> None:
    np.savetxt(path, cloud.points, delimiter=",", fmt="%.6f")


def read_csv(path) -> PointCloud:
    text = Path(path).read_text().strip()
    if not text:
        return PointCloud.empty()
    try:
        pts = np.loadtxt(text.splitlines(), delimiter=",", ndmin=2)
    except ValueError as exc:
        raise ScanFormatError(f"{path}: {exc}") from exc
    if pts.shape[1] != 3:
        raise ScanFormatError(f"{path}: expected 3 columns, got {pts.shape[1]}")
    return PointCloud(pts)


def read_scan(path) -> PointCloud:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return read_csv(path)
    return read_llpc(path)


def write_scan(path, cloud: PointCloud) -> None:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        write_csv(path, cloud)
    else:
        write_llpc(path, cloud)


def write_times(path, times: np.ndarray) -> None:
    """Per-point capture times as raw float64 LE, sidecar to an LLPC scan."""
    np.ascontiguousarray(times, dtype="<f8").tofile(path)


def read_times(path) -> np.ndarray:
    return np.fromfile(path, dtype="<f8").astype(float)
