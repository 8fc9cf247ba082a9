"""Joint factor graph: damped Gauss-Newton on manifold and Schur marginalization."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np
import scipy.linalg

from liloc.factorgraph.factors import (
    ANCHOR,
    MARGINAL,
    SCAN_MATCH,
    Factor,
    MarginalPriorFactor,
    PriorFactor,
    pose_information,
)
from liloc.factorgraph.variables import Key, Value, check_value, format_value, retract

log = logging.getLogger(__name__)

# anchor noises (translation m, rotation rad) for the prior and the active session
PRIOR_ANCHOR_SIGMA = (1e-3, 1e-3)
# translation is a linear gauge and may stay loose; yaw enters nonlinearly and a
# loose yaw gauge makes relinearized marginal priors inconsistent
ACTIVE_ANCHOR_SIGMA = (1.0, 0.01)
HBB_REGULARIZATION = 1e-9


class GraphError(ValueError):
    pass


class SolverError(RuntimeError):
    def __init__(self, message: str, diagnostics: Optional[dict] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass
class SolverParams:
    max_iterations: int = 20
    relative_tolerance: float = 1e-6
    step_tolerance: float = 1e-9  # a small cost decrease alone does not stop a still-moving solve
    lambda_factor: float = 10.0
    lambda_start: float = 1e-6  # first nonzero damping once plain GN fails
    lambda_max: float = 1e10


@dataclass
class OptimizeResult:
    initial_cost: float
    final_cost: float
    iterations: int
    converged: bool
    costs: List[float] = field(default_factory=list)


@dataclass
class MarginalInfo:
    dropped: Tuple[Key, ...]
    retained: Tuple[Key, ...]
    H: np.ndarray
    b: np.ndarray
    regularized: bool
    factor: Optional[MarginalPriorFactor]


def _solve_spd(A: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    c = scipy.linalg.cho_factor(A, lower=True, check_finite=False)
    return scipy.linalg.cho_solve(c, rhs, check_finite=False)


def _is_spd(A: np.ndarray) -> bool:
    try:
        np.linalg.cholesky(A)
        return True
    except np.linalg.LinAlgError:
        return False


class JointGraph:
    """Variables of one or more sessions plus the factors between them.

    Scan-match factors participate only while the mode weight is 1.
    """

    def __init__(self):
        self.values: Dict[Key, Value] = {}
        self.factors: List[Factor] = []
        self.mode_weight = 1

    # --- construction -------------------------------------------------------

    def add_variable(self, key: Key, value: Value) -> None:
        if key in self.values:
            raise GraphError(f"duplicate variable {key}")
        self.values[key] = check_value(key, value)

    def set_value(self, key: Key, value: Value) -> None:
        if key not in self.values:
            raise GraphError(f"unknown variable {key}")
        self.values[key] = check_value(key, value)

    def __contains__(self, key: Key) -> bool:
        return key in self.values

    def add_factor(self, factor: Factor) -> Factor:
        missing = [k for k in factor.keys if k not in self.values]
        if missing:
            raise GraphError(f"{factor.kind} factor references unknown variables {[str(k) for k in missing]}")
        if factor.kind == ANCHOR:
            session = factor.keys[0].session
            if any(f.kind == ANCHOR and f.keys[0].session == session for f in self.factors):
                raise GraphError(f"session {session!r} already has an anchor")
        self.factors.append(factor)
        return factor

    def add_anchor(self, key: Key, value: Value, prior_session: bool, sigma=None) -> PriorFactor:
        """Gauge prior; ``sigma`` = (translation, rotation) overrides the session default."""
        sigma_t, sigma_r = sigma or (PRIOR_ANCHOR_SIGMA if prior_session else ACTIVE_ANCHOR_SIGMA)
        if key not in self.values:
            self.add_variable(key, value)
        return self.add_factor(PriorFactor(key, value, pose_information(sigma_t, sigma_r), kind=ANCHOR))

    def attach_scan_match(self, factors: Iterable[Factor]) -> None:
        factors = list(factors)
        for f in factors:
            if f.kind != SCAN_MATCH:
                raise GraphError(f"expected scan-match factor, got {f.kind}")
            missing = [k for k in f.keys if k not in self.values]
            if missing:
                raise GraphError(f"scan-match factor references unknown variables {[str(k) for k in missing]}")
        self.factors.extend(factors)

    def set_mode_weight(self, w: int) -> None:
        if w not in (0, 1):
            raise GraphError("mode weight is 0 (incremental) or 1 (relocalization)")
        self.mode_weight = int(w)

    def remove_factors(self, predicate) -> int:
        before = len(self.factors)
        self.factors = [f for f in self.factors if not predicate(f)]
        return before - len(self.factors)

    def active_factors(self) -> List[Factor]:
        if self.mode_weight:
            return list(self.factors)
        return [f for f in self.factors if f.kind != SCAN_MATCH]

    def factors_of(self, key: Key) -> List[Factor]:
        return [f for f in self.factors if key in f.keys]

    def keys(self) -> List[Key]:
        return list(self.values)

    # --- evaluation ---------------------------------------------------------

    def cost(self, values: Optional[Dict[Key, Value]] = None) -> float:
        values = self.values if values is None else values
        return float(sum(f.cost(values) for f in self.active_factors()))

    def _layout(self, keys: Sequence[Key]) -> Dict[Key, int]:
        offsets, n = {}, 0
        for k in keys:
            offsets[k] = n
            n += k.dim
        return offsets

    def normal_equations(self, factors: Sequence[Factor], keys: Sequence[Key], values=None):
        """H = sum J^T J and g = sum J^T r over whitened factors, plus the cost."""
        values = self.values if values is None else values
        offsets = self._layout(keys)
        n = sum(k.dim for k in keys)
        H = np.zeros((n, n))
        g = np.zeros(n)
        cost = 0.0
        for f in factors:
            r, Js = f.linearize(values)
            cost += 0.5 * float(r @ r)
            idx = [(offsets[k], k.dim) for k in f.keys]
            for (a, da), Ja in zip(idx, Js):
                g[a:a + da] += Ja.T @ r
                for (b, db), Jb in zip(idx, Js):
                    H[a:a + da, b:b + db] += Ja.T @ Jb
        return H, g, cost

    def _retract_all(self, keys: Sequence[Key], dx: np.ndarray) -> Dict[Key, Value]:
        out = dict(self.values)
        n = 0
        for k in keys:
            out[k] = retract(k.kind, self.values[k], dx[n:n + k.dim])
            n += k.dim
        return out

    # --- optimization -------------------------------------------------------

    def optimize(self, params: SolverParams = SolverParams()) -> OptimizeResult:
        keys = self.keys()
        factors = self.active_factors()
        cost = float(sum(f.cost(self.values) for f in factors))
        result = OptimizeResult(cost, cost, 0, False, [cost])
        if not keys:
            result.converged = True
            return result
        lam = 0.0
        result.converged = False
        for it in range(params.max_iterations):
            H, g, cost = self.normal_equations(factors, keys)
            result.iterations = it + 1
            accepted = False
            solved_once = False
            while True:
                A = H + lam * np.diag(np.diag(H)) if lam > 0 else H
                try:
                    dx = _solve_spd(A, -g)
                    solved_once = True
                except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
                    dx = None
                if dx is not None and np.all(np.isfinite(dx)):
                    candidate = self._retract_all(keys, dx)
                    new_cost = float(sum(f.cost(candidate) for f in factors))
                    if new_cost <= cost:
                        accepted = True
                        break
                lam = params.lambda_start if lam == 0.0 else lam * params.lambda_factor
                if lam > params.lambda_max:
                    break
            if not accepted:
                if not solved_once:
                    raise SolverError(
                        "normal equations singular after damping",
                        {"cost": cost, "dimension": H.shape[0], "min_diag": float(np.diag(H).min()),
                         "lambda": lam, "variables": [str(k) for k in keys]},
                    )
                # no descent direction left: current values are a minimum to numerical precision
                result.converged = True
                break
            self.values = candidate
            result.costs.append(new_cost)
            decrease = (cost - new_cost) / max(cost, 1e-300)
            lam = lam / params.lambda_factor if lam > params.lambda_start else 0.0
            if decrease < params.relative_tolerance and np.abs(dx).max() < params.step_tolerance:
                result.converged = True
                break
        result.final_cost = self.cost()
        return result

    # --- marginalization ----------------------------------------------------

    def markov_blanket(self, drop: Set[Key]) -> List[Key]:
        blanket = []
        for f in self.factors:
            if any(k in drop for k in f.keys):
                for k in f.keys:
                    if k not in drop and k not in blanket:
                        blanket.append(k)
        return [k for k in self.values if k in blanket]

    def marginalize(self, drop: Iterable[Key], keep: Optional[Iterable[Key]] = None) -> MarginalInfo:
        drop = [k for k in self.values if k in set(drop)]
        missing = set(drop) - set(self.values)
        if missing:
            raise GraphError(f"cannot marginalize unknown variables {[str(k) for k in missing]}")
        if not drop:
            return MarginalInfo((), (), np.zeros((0, 0)), np.zeros(0), False, None)
        drop_set = set(drop)
        alpha = self.markov_blanket(drop_set)
        if keep is not None:
            allowed = set(keep) | drop_set
            for f in self.factors:
                if any(k in drop_set for k in f.keys) and not set(f.keys) <= allowed:
                    raise GraphError(f"{f.kind} factor spans outside the retained and dropped sets")
        touching = [f for f in self.factors if any(k in drop_set for k in f.keys)]
        used = [f for f in touching if self.mode_weight or f.kind != SCAN_MATCH]
        keys = alpha + drop
        H, g, _ = self.normal_equations(used, keys)
        b = -g
        na = sum(k.dim for k in alpha)
        Haa, Hab, Hbb = H[:na, :na], H[:na, na:], H[na:, na:]
        ba, bb = b[:na], b[na:]
        regularized = False
        if not _is_spd(Hbb):
            Hbb = Hbb + HBB_REGULARIZATION * np.eye(Hbb.shape[0])
            regularized = True
            log.warning("marginalization: H_bb singular, regularized with %g I", HBB_REGULARIZATION)
        if na:
            try:
                X = _solve_spd(Hbb, np.c_[Hab.T, bb])
            except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
                X = np.linalg.lstsq(Hbb, np.c_[Hab.T, bb], rcond=None)[0]
                regularized = True
            H_hat = Haa - Hab @ X[:, :na]
            b_hat = ba - Hab @ X[:, na]
            H_hat = 0.5 * (H_hat + H_hat.T)
        else:
            H_hat, b_hat = np.zeros((0, 0)), np.zeros(0)
        self.factors = [f for f in self.factors if f not in touching]
        for k in drop:
            del self.values[k]
        factor = None
        if na and np.linalg.eigvalsh(H_hat).max() > 0:
            factor = MarginalPriorFactor(alpha, self.values, H_hat, b_hat)
            if factor.dim:
                self.factors.append(factor)
            else:
                factor = None
        return MarginalInfo(tuple(drop), tuple(alpha), H_hat, b_hat, regularized, factor)

    # --- checks and output --------------------------------------------------

    def validate(self) -> None:
        """Each connected component must reach an anchor or a marginal prior."""
        anchors: Dict[str, PriorFactor] = {}
        for f in self.factors:
            if f.kind == ANCHOR:
                s = f.keys[0].session
                if s in anchors:
                    raise GraphError(f"session {s!r} has more than one anchor")
                anchors[s] = f
        parent = {k: k for k in self.values}

        def find(k):
            while parent[k] != k:
                parent[k] = parent[parent[k]]
                k = parent[k]
            return k

        for f in self.active_factors():
            root = find(f.keys[0])
            for k in f.keys[1:]:
                parent[find(k)] = root
        grounded = {find(f.keys[0]) for f in self.factors if f.kind in (ANCHOR, MARGINAL)}
        floating = [str(k) for k in self.values if find(k) not in grounded]
        if floating:
            raise GraphError(f"variables not connected to an anchor: {floating[:5]}")

    def dump(self) -> str:
        lines = [f"VAR {k} {k.kind} {format_value(k.kind, v)}" for k, v in self.values.items()]
        for f in self.factors:
            if f.kind == SCAN_MATCH and not self.mode_weight:
                continue
            r, _ = f.linearize(self.values)
            ids = " ".join(str(k) for k in f.keys)
            lines.append(f"FACTOR {f.kind} {ids} {np.linalg.norm(r):.9g}")
        return "\n".join(lines) + "\n"

    def copy(self) -> "JointGraph":
        g = JointGraph()
        g.values = dict(self.values)
        g.factors = list(self.factors)
        g.mode_weight = self.mode_weight
        return g
