"""Absolute trajectory error between an estimate and ground truth."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from liloc.geometry import Pose, Rotation, so3_log

MATCH_TOLERANCE = 0.05  # s


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class AteReport:
    xyz_rmse: float  # m
    rot_rmse: float  # rad
    matched: int
    aligned: bool
    xyz_max: float = 0.0

    def format(self) -> str:
        return (f"xyz_rmse_m {self.xyz_rmse:.6f}\nrot_rmse_rad {self.rot_rmse:.6f}\n"
                f"xyz_max_m {self.xyz_max:.6f}\nmatched {self.matched}\naligned {int(self.aligned)}\n")


def match_timestamps(est: Sequence[Pose], gt: Sequence[Pose],
                     tolerance: float = MATCH_TOLERANCE) -> List[Tuple[int, int]]:
    """Pairs (estimate index, ground-truth index) of nearest timestamps within ``tolerance``."""
    if not est or not gt:
        return []
    tg = np.array([p.timestamp for p in gt], dtype=float)
    order = np.argsort(tg)
    tg = tg[order]
    pairs = []
    for i, p in enumerate(est):
        j = int(np.searchsorted(tg, p.timestamp))
        best = min((c for c in (j - 1, j) if 0 <= c < len(tg)), key=lambda c: abs(tg[c] - p.timestamp))
        if abs(tg[best] - p.timestamp) <= tolerance:
            pairs.append((i, int(order[best])))
    return pairs


def umeyama(src: np.ndarray, dst: np.ndarray) -> Pose:
    """Rigid transform (no scale) minimizing |dst - (R src + t)|^2."""
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    cov = (dst - mu_d).T @ (src - mu_s) / len(src)
    U, _, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    return Pose(Rotation.from_matrix(R), mu_d - R @ mu_s)


def ate(est: Sequence[Pose], gt: Sequence[Pose], align: bool = False,
        tolerance: float = MATCH_TOLERANCE) -> AteReport:
    pairs = match_timestamps(est, gt, tolerance)
    if not pairs:
        raise EvaluationError("no estimate timestamp lies within "
                              f"{tolerance} s of a ground-truth timestamp")
    E = [est[i] for i, _ in pairs]
    G = [gt[j] for _, j in pairs]
    if align and len(pairs) >= 3:
        T = umeyama(np.array([p.translation for p in E]), np.array([p.translation for p in G]))
        E = [T.compose(p) for p in E]
    dt = np.array([p.translation - g.translation for p, g in zip(E, G)])
    dr = np.array([np.linalg.norm(so3_log(g.R.T @ p.R)) for p, g in zip(E, G)])
    d = np.linalg.norm(dt, axis=1)
    return AteReport(float(np.sqrt(np.mean(d**2))), float(np.sqrt(np.mean(dr**2))),
                     len(pairs), bool(align and len(pairs) >= 3), float(d.max()))


__all__ = ["AteReport", "EvaluationError", "MATCH_TOLERANCE", "ate", "match_timestamps", "umeyama"]
