"""Factor kinds with analytic residuals and Jacobians.

Every factor returns its raw residual and one Jacobian block per connected
variable (with respect to that variable's retraction); the graph whitens
both with the square-root information.
"""

from __future__ import annotations

from typing import Dict, List, Sequence, Tuple

import numpy as np

from liloc.factorgraph.variables import (
    BIAS,
    DIMS,
    POSE,
    VELOCITY,
    Key,
    Value,
    local,
    local_jacobian,
)
from liloc.geometry import Pose, right_jacobian_inv, skew, so3_log
from liloc.imu import GRAVITY, NavState, PreintegratedDelta, residual as imu_residual

ANCHOR = "anchor-prior"
STATE_PRIOR = "state-prior"
PREINTEGRATION = "preintegration"
ODOMETRY = "odometry-between"
SCAN_MATCH = "scan-match"
BIAS_WALK = "bias-walk"
MARGINAL = "marginal-prior"
KINDS = (ANCHOR, STATE_PRIOR, PREINTEGRATION, ODOMETRY, SCAN_MATCH, BIAS_WALK, MARGINAL)


class FactorError(ValueError):
    pass


def diagonal_information(sigmas) -> np.ndarray:
    s = np.asarray(sigmas, dtype=float)
    if np.any(s <= 0) or not np.all(np.isfinite(s)):
        raise FactorError("noise sigmas must be positive and finite")
    return np.diag(1.0 / s**2)


def pose_information(sigma_translation: float, sigma_rotation: float) -> np.ndarray:
    return diagonal_information([sigma_rotation] * 3 + [sigma_translation] * 3)


class Factor:
    kind: str = ""
    keys: Tuple[Key, ...] = ()

    def __init__(self, keys: Sequence[Key], information: np.ndarray):
        self.keys = tuple(keys)
        info = np.asarray(information, dtype=float)
        if info.shape != (self.dim, self.dim):
            raise FactorError(f"{self.kind}: information is {info.shape}, residual has {self.dim}")
        if not np.allclose(info, info.T, rtol=1e-9, atol=1e-12 * max(1.0, np.abs(info).max())):
            raise FactorError(f"{self.kind}: information must be symmetric")
        info = 0.5 * (info + info.T)
        try:
            L = np.linalg.cholesky(info)
        except np.linalg.LinAlgError:
            raise FactorError(f"{self.kind}: information must be positive definite") from None
        self.information = info
        self.sqrt_info = L.T

    @property
    def dim(self) -> int:
        raise NotImplementedError

    def error(self, values: Dict[Key, Value]) -> Tuple[np.ndarray, List[np.ndarray]]:
        raise NotImplementedError

    def linearize(self, values):
        r, Js = self.error(values)
        W = self.sqrt_info
        return W @ r, [W @ J for J in Js]

    def cost(self, values) -> float:
        r, _ = self.error(values)
        e = self.sqrt_info @ r
        return 0.5 * float(e @ e)


class PriorFactor(Factor):
    """Unary prior on one variable; kind is ``anchor-prior`` for session anchors."""

    def __init__(self, key: Key, measured: Value, information, kind: str = STATE_PRIOR):
        self.kind = kind
        self.key = key
        self.measured = measured
        self._dim = DIMS[key.kind]
        super().__init__([key], information)

    @property
    def dim(self) -> int:
        return self._dim

    def error(self, values):
        x = values[self.key]
        r = local(self.key.kind, self.measured, x)
        return r, [local_jacobian(self.key.kind, self.measured, x)]


def between_error(Ti: Pose, Tj: Pose, Z: Pose):
    """Residual of Z^-1 Ti^-1 Tj as (rotation log, translation) and its Jacobians."""
    Ri, Rj, dR = Ti.R, Tj.R, Z.R
    d = Ri.T @ (Tj.translation - Ti.translation)
    E = dR.T @ Ri.T @ Rj
    rR = so3_log(E)
    rt = dR.T @ (d - Z.translation)
    Jr_inv = right_jacobian_inv(rR)
    Ji = np.zeros((6, 6))
    Ji[:3, :3] = -Jr_inv @ Rj.T @ Ri
    Ji[3:, :3] = dR.T @ skew(d)
    Ji[3:, 3:] = -dR.T @ Ri.T
    Jj = np.zeros((6, 6))
    Jj[:3, :3] = Jr_inv
    Jj[3:, 3:] = dR.T @ Ri.T
    return np.r_[rR, rt], Ji, Jj


class BetweenFactor(Factor):
    """Relative-pose constraint; used for odometry edges and scan-match edges."""

    def __init__(self, key_i: Key, key_j: Key, measured: Pose, information, kind: str = ODOMETRY,
                 fitness: float = 0.0):
        if key_i.kind != POSE or key_j.kind != POSE:
            raise FactorError("between factors connect two poses")
        self.kind = kind
        self.measured = measured
        self.fitness = float(fitness)
        super().__init__([key_i, key_j], information)

    @property
    def dim(self) -> int:
        return 6

    def error(self, values):
        r, Ji, Jj = between_error(values[self.keys[0]], values[self.keys[1]], self.measured)
        return r, [Ji, Jj]


class ImuFactor(Factor):
    """Preintegrated IMU constraint between two navigation states."""

    kind = PREINTEGRATION

    def __init__(self, pose_i: Key, vel_i: Key, bias_i: Key, pose_j: Key, vel_j: Key,
                 delta: PreintegratedDelta, gravity=GRAVITY, information=None):
        self.delta = delta
        self.gravity = np.asarray(gravity, dtype=float)
        if information is None:
            cov = delta.residual_covariance() + 1e-12 * np.eye(9)
            information = np.linalg.inv(cov)
            information = 0.5 * (information + information.T)
        super().__init__([pose_i, vel_i, bias_i, pose_j, vel_j], information)

    @property
    def dim(self) -> int:
        return 9

    def error(self, values):
        pi, vi, bi, pj, vj = (values[k] for k in self.keys)
        si = NavState(pi, vi, bi[:3], bi[3:])
        sj = NavState(pj, vj)
        r, J = imu_residual(self.delta, si, sj, self.gravity)
        return r, [J["pose_i"], J["velocity_i"], J["bias_i"], J["pose_j"], J["velocity_j"]]


class BiasWalkFactor(Factor):
    kind = BIAS_WALK

    def __init__(self, bias_i: Key, bias_j: Key, information):
        if bias_i.kind != BIAS or bias_j.kind != BIAS:
            raise FactorError("bias walk connects two bias variables")
        super().__init__([bias_i, bias_j], information)

    @property
    def dim(self) -> int:
        return 6

    def error(self, values):
        r = values[self.keys[1]] - values[self.keys[0]]
        return r, [-np.eye(6), np.eye(6)]


def bias_walk_information(dt: float, accel_walk: float, gyro_walk: float, floor: float = 1e-6):
    dt = max(dt, 1e-3)
    sa = max(accel_walk * np.sqrt(dt), floor)
    sg = max(gyro_walk * np.sqrt(dt), floor)
    return diagonal_information([sa] * 3 + [sg] * 3)


class MarginalPriorFactor(Factor):
    """Dense linear prior left behind by marginalization.

    With ``H = V S V^T`` (non-null part) the cost
    ``0.5 d^T H d - b^T d`` is written as the residual
    ``S^1/2 V^T d - S^-1/2 V^T b`` with identity information, where ``d`` is
    the stacked tangent offset of the variables from the linearization point.
    """

    kind = MARGINAL

    def __init__(self, keys: Sequence[Key], linearization: Dict[Key, Value], H: np.ndarray, b: np.ndarray,
                 rank_tol: float = 1e-12):
        keys = tuple(keys)
        self.linearization = {k: linearization[k] for k in keys}
        self.H = 0.5 * (H + H.T)
        self.b = np.asarray(b, dtype=float)
        s, V = np.linalg.eigh(self.H)
        keep = s > rank_tol * max(1.0, s.max(initial=0.0))
        s, V = s[keep], V[:, keep]
        self.A = np.sqrt(s)[:, None] * V.T
        self.rhs = (V.T @ self.b) / np.sqrt(s)
        self.offsets = np.cumsum([0] + [k.dim for k in keys])
        self._dim = self.A.shape[0]
        self.keys = keys
        self.information = np.eye(self._dim)
        self.sqrt_info = np.eye(self._dim)

    @property
    def dim(self) -> int:
        return self._dim

    def error(self, values):
        d = np.concatenate([local(k.kind, self.linearization[k], values[k]) for k in self.keys])
        r = self.A @ d - self.rhs
        Js = []
        for n, k in enumerate(self.keys):
            a, b = self.offsets[n], self.offsets[n + 1]
            Js.append(self.A[:, a:b] @ local_jacobian(k.kind, self.linearization[k], values[k]))
        return r, Js

    def linearize(self, values):
        return self.error(values)
