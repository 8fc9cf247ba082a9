import math

import numpy as np
import pytest

from liloc.factorgraph import (
    ANCHOR,
    SCAN_MATCH,
    BetweenFactor,
    BiasWalkFactor,
    FactorError,
    GraphError,
    ImuFactor,
    JointGraph,
    MarginalPriorFactor,
    PriorFactor,
    SolverError,
    SolverParams,
    bias_key,
    local,
    pose_information,
    pose_key,
    retract,
    velocity_key,
)
from liloc.factorgraph.variables import BIAS, POSE, VELOCITY
from liloc.geometry import Pose, Rotation
from liloc.imu import ImuNoise, ImuSeries, NavState, integrate, predict


def random_pose(rng, scale=5.0):
    return Pose(Rotation.exp(rng.uniform(-1.5, 1.5, 3)), rng.normal(0, scale, 3))


def random_spd(rng, n, scale=1.0):
    A = rng.normal(size=(n, n))
    return scale * (A @ A.T + n * np.eye(n))


def pose_distance(a: Pose, b: Pose) -> float:
    return float(np.linalg.norm(local(POSE, a, b)))


# --- factor construction --------------------------------------------------

def test_information_must_be_spd():
    k = pose_key("a", 0)
    with pytest.raises(FactorError):
        PriorFactor(k, Pose.identity(), -np.eye(6))
    with pytest.raises(FactorError):
        PriorFactor(k, Pose.identity(), np.eye(3))
    bad = np.eye(6)
    bad[0, 1] = 0.5
    with pytest.raises(FactorError):
        PriorFactor(k, Pose.identity(), bad)


def test_dangling_reference_rejected():
    g = JointGraph()
    g.add_variable(pose_key("b", 0), Pose.identity())
    f = BetweenFactor(pose_key("a", 0), pose_key("b", 0), Pose.identity(), np.eye(6), kind=SCAN_MATCH)
    with pytest.raises(GraphError):
        g.attach_scan_match([f])
    with pytest.raises(GraphError):
        g.add_factor(f)


def test_one_anchor_per_session():
    g = JointGraph()
    g.add_anchor(pose_key("a", 0), Pose.identity(), prior_session=True)
    g.add_variable(pose_key("a", 1), Pose.identity())
    with pytest.raises(GraphError):
        g.add_anchor(pose_key("a", 1), Pose.identity(), prior_session=True)


def test_validate_detects_floating_variable():
    g = JointGraph()
    g.add_anchor(pose_key("a", 0), Pose.identity(), prior_session=True)
    g.validate()
    g.add_variable(pose_key("a", 1), Pose.identity())
    with pytest.raises(GraphError):
        g.validate()


def test_anchor_noise_ordering():
    g = JointGraph()
    fa = g.add_anchor(pose_key("a", 0), Pose.identity(), prior_session=True)
    fb = g.add_anchor(pose_key("b", 0), Pose.identity(), prior_session=False)
    assert np.all(np.diag(fa.information) > np.diag(fb.information))


# --- solver ---------------------------------------------------------------

def test_single_anchor_at_truth_unchanged():
    g = JointGraph()
    p = Pose(Rotation.from_rpy(0.1, 0.2, 0.3), [1.0, 2.0, 3.0])
    g.add_anchor(pose_key("a", 0), p, prior_session=True)
    res = g.optimize()
    assert res.final_cost == 0.0
    np.testing.assert_array_equal(g.values[pose_key("a", 0)].matrix(), p.matrix())


def test_noiseless_chain_recovers_composition():
    rng = np.random.default_rng(0)
    steps = [random_pose(rng, 2.0) for _ in range(2)]
    truth = [Pose.identity()]
    for s in steps:
        truth.append(truth[-1].compose(s))
    g = JointGraph()
    g.add_anchor(pose_key("a", 0), truth[0], prior_session=False)
    for i in (1, 2):
        g.add_variable(pose_key("a", i), Pose.identity())
        g.add_factor(BetweenFactor(pose_key("a", i - 1), pose_key("a", i), steps[i - 1], pose_information(0.1, 0.1)))
    g.optimize()
    for i in range(3):
        np.testing.assert_allclose(g.values[pose_key("a", i)].matrix(), truth[i].matrix(), atol=1e-8)


def _chain_problem(rng, n=10):
    truth = [Pose(Rotation.yaw(0.0), [0.0, 0.0, 0.0])]
    for _ in range(n - 1):
        truth.append(truth[-1].compose(Pose(Rotation.from_rpy(*rng.normal(0, 0.1, 3)), rng.normal([1, 0, 0], 0.2))))
    g = JointGraph()
    g.add_anchor(pose_key("b", 0), truth[0], prior_session=False)
    for i in range(1, n):
        g.add_variable(pose_key("b", i), truth[i].compose(Pose(Rotation.exp(rng.normal(0, 0.05, 3)), rng.normal(0, 0.3, 3))))
    for i in range(1, n):
        z = truth[i - 1].inverse().compose(truth[i]).compose(Pose(Rotation.exp(rng.normal(0, 0.02, 3)), rng.normal(0, 0.05, 3)))
        g.add_factor(BetweenFactor(pose_key("b", i - 1), pose_key("b", i), z, pose_information(0.05, 0.02)))
    for i, j in ((0, 5), (2, 8), (4, 9)):
        z = truth[i].inverse().compose(truth[j])
        g.add_factor(BetweenFactor(pose_key("b", i), pose_key("b", j), z, pose_information(0.02, 0.01), kind=SCAN_MATCH))
    return g, truth


def _dense_gn_oracle(g: JointGraph, iterations=15):
    """Independent reference: stacked residual vector, numerical Jacobian, plain GN."""
    keys = g.keys()
    values = dict(g.values)
    factors = g.active_factors()

    def stacked(vals):
        return np.concatenate([f.sqrt_info @ f.error(vals)[0] for f in factors])

    n = sum(k.dim for k in keys)
    for _ in range(iterations):
        r0 = stacked(values)
        J = np.zeros((len(r0), n))
        col = 0
        for k in keys:
            for d in range(k.dim):
                e = np.zeros(k.dim)
                e[d] = 1e-5
                vp, vm = dict(values), dict(values)
                vp[k] = retract(k.kind, values[k], e)
                vm[k] = retract(k.kind, values[k], -e)
                J[:, col] = (stacked(vp) - stacked(vm)) / 2e-5
                col += 1
        dx = np.linalg.solve(J.T @ J, -J.T @ r0)
        col = 0
        for k in keys:
            values[k] = retract(k.kind, values[k], dx[col:col + k.dim])
            col += k.dim
        if np.linalg.norm(dx) < 1e-10:
            break
    return values


def test_chain_matches_dense_gauss_newton_oracle():
    rng = np.random.default_rng(3)
    for _ in range(3):
        g, _ = _chain_problem(rng)
        oracle = _dense_gn_oracle(g.copy())
        res = g.optimize()
        assert res.converged
        for k in g.keys():
            assert pose_distance(g.values[k], oracle[k]) < 1e-6


def test_cost_never_increases():
    g, _ = _chain_problem(np.random.default_rng(4))
    res = g.optimize()
    assert all(b <= a for a, b in zip(res.costs, res.costs[1:]))
    assert res.iterations <= 20


def _linear_chain(rng, n=4):
    g = JointGraph()
    keys = [bias_key("a", i) for i in range(n)]
    for k in keys:
        g.add_variable(k, rng.normal(size=6))
    g.add_factor(PriorFactor(keys[0], rng.normal(size=6), random_spd(rng, 6)))
    for a, b in zip(keys, keys[1:]):
        g.add_factor(BiasWalkFactor(a, b, random_spd(rng, 6)))
    g.add_factor(PriorFactor(keys[-1], rng.normal(size=6), random_spd(rng, 6, 0.1)))
    return g, keys


def _dense_linear_solution(g, keys):
    H, grad, _ = g.normal_equations(g.active_factors(), keys)
    x0 = np.concatenate([g.values[k] for k in keys])
    return x0 - np.linalg.solve(H, grad), np.linalg.inv(H)


def test_linear_graph_exact_in_one_iteration():
    rng = np.random.default_rng(5)
    g, keys = _linear_chain(rng, 6)
    x_star, _ = _dense_linear_solution(g, keys)
    h = g.copy()
    h.optimize(SolverParams(max_iterations=1))
    np.testing.assert_allclose(np.concatenate([h.values[k] for k in keys]), x_star, atol=1e-10)


def test_singular_system_raises_solver_error():
    g = JointGraph()
    g.add_variable(velocity_key("a", 0), np.zeros(3))
    g.add_variable(velocity_key("a", 1), np.ones(3))
    g.add_factor(PriorFactor(velocity_key("a", 0), np.zeros(3), np.eye(3)))
    g.factors.append(_ZeroFactor(velocity_key("a", 1)))
    with pytest.raises(SolverError) as info:
        g.optimize()
    assert "variables" in info.value.diagnostics


class _ZeroFactor(PriorFactor):
    """Residual that does not depend on its variable."""

    def __init__(self, key):
        super().__init__(key, np.zeros(3), np.eye(3))

    def error(self, values):
        return np.ones(3), [np.zeros((3, 3))]


# --- mode weight ----------------------------------------------------------

def _two_session_toy(sigma_a=1e-3):
    g = JointGraph()
    ka, kb0, kb1 = pose_key("a", 0), pose_key("b", 0), pose_key("b", 1)
    g.add_variable(ka, Pose.identity())
    g.add_factor(PriorFactor(ka, Pose.identity(), pose_information(sigma_a, sigma_a), kind=ANCHOR))
    g.add_anchor(kb0, Pose.from_xyz_rpy(1.0, 0.5, 0.0), prior_session=False)
    g.add_variable(kb1, Pose.from_xyz_rpy(2.0, 0.5, 0.0))
    g.add_factor(BetweenFactor(kb0, kb1, Pose.from_xyz_rpy(1.0, 0.0, 0.0), pose_information(0.01, 0.01)))
    g.attach_scan_match([BetweenFactor(ka, kb1, Pose.from_xyz_rpy(1.0, 0.0, 0.0), pose_information(0.05, 0.01),
                                       kind=SCAN_MATCH)])
    return g, kb0, kb1


def test_zero_weight_equals_odometry_only():
    g, kb0, kb1 = _two_session_toy()
    odo = g.copy()
    odo.remove_factors(lambda f: f.kind == SCAN_MATCH)
    g.set_mode_weight(0)
    g.optimize()
    odo.optimize()
    for k in g.keys():
        np.testing.assert_array_equal(g.values[k].matrix(), odo.values[k].matrix())
    assert "scan-match" not in g.dump()


def test_unit_weight_pulls_toward_prior_frame():
    g, kb0, kb1 = _two_session_toy()
    g0 = g.copy()
    g0.set_mode_weight(0)
    g0.optimize()
    g.optimize()
    truth = Pose.from_xyz_rpy(1.0, 0.0, 0.0)
    assert pose_distance(g.values[kb1], truth) < pose_distance(g0.values[kb1], truth)
    g.set_mode_weight(0)
    assert g.cost() < g.copy().cost() + 1e-12  # weight is read at evaluation time only


def test_mode_weight_validated():
    with pytest.raises(GraphError):
        JointGraph().set_mode_weight(0.5)


def test_tighter_prior_anchor_moves_active_anchor_monotonically():
    moves = []
    for sigma in (1.0, 0.3, 0.1, 0.03, 1e-3):
        g, kb0, _ = _two_session_toy(sigma)
        g.optimize()
        moves.append(np.linalg.norm(g.values[kb0].translation - [1.0, 0.5, 0.0]))
    assert all(b > a for a, b in zip(moves, moves[1:]))


# --- marginalization ------------------------------------------------------

def test_empty_drop_is_identity():
    g, keys = _linear_chain(np.random.default_rng(6))
    before = g.dump()
    info = g.marginalize([])
    assert info.factor is None and g.dump() == before


def test_two_variable_analytic_marginal():
    # x0 with prior (mean m, info P), x1 linked by x1 - x0 = d with info Q:
    # marginal on x1 has mean m + d and info P - P (P + Q)^-1 P ... = (P^-1 + Q^-1)^-1
    rng = np.random.default_rng(7)
    P, Q = random_spd(rng, 6), random_spd(rng, 6)
    m = rng.normal(size=6)
    g = JointGraph()
    k0, k1 = bias_key("a", 0), bias_key("a", 1)
    g.add_variable(k0, np.zeros(6))
    g.add_variable(k1, np.zeros(6))
    g.add_factor(PriorFactor(k0, m, P))
    walk = BiasWalkFactor(k0, k1, Q)
    g.add_factor(walk)
    info = g.marginalize([k0])
    expected = np.linalg.inv(np.linalg.inv(P) + np.linalg.inv(Q))
    np.testing.assert_allclose(info.H, expected, atol=1e-10)
    g.optimize()
    np.testing.assert_allclose(g.values[k1], m, atol=1e-10)


def test_marginal_prior_on_between_equals_direct_prior():
    # pose x0 anchored, x1 tied by exact between: marginal on x1 is the composed prior
    g = JointGraph()
    k0, k1 = pose_key("a", 0), pose_key("a", 1)
    p0 = Pose.from_xyz_rpy(1.0, 2.0, 0.0, 0.0, 0.0, 0.4)
    z = Pose.from_xyz_rpy(1.0, 0.0, 0.0)
    g.add_variable(k0, p0)
    g.add_factor(PriorFactor(k0, p0, pose_information(0.1, 0.1), kind=ANCHOR))
    g.add_variable(k1, p0.compose(z))
    g.add_factor(BetweenFactor(k0, k1, z, pose_information(0.2, 0.2)))
    info = g.marginalize([k0])
    assert isinstance(info.factor, MarginalPriorFactor)
    # covariance of x1 is J0 S0 J0^T + S1 in the tangent at x1
    from liloc.factorgraph.factors import between_error
    _, Ji, Jj = between_error(p0, p0.compose(z), z)
    A = np.linalg.solve(Jj, Ji)
    cov = A @ np.diag([0.01] * 6) @ A.T + np.linalg.inv(Jj) @ np.diag([0.04] * 6) @ np.linalg.inv(Jj).T
    np.testing.assert_allclose(info.H, np.linalg.inv(cov), rtol=1e-9, atol=1e-9)
    np.testing.assert_allclose(info.b, 0.0, atol=1e-12)


def test_linear_marginalization_matches_full_solve():
    rng = np.random.default_rng(8)
    for n in (4, 6):
        g, keys = _linear_chain(rng, n)
        x_full, cov_full = _dense_linear_solution(g, keys)
        drop = keys[:2]
        g.marginalize(drop)
        g.optimize()
        kept = np.concatenate([g.values[k] for k in keys[2:]])
        np.testing.assert_allclose(kept, x_full[12:], atol=1e-10)
        H, _, _ = g.normal_equations(g.active_factors(), keys[2:])
        np.testing.assert_allclose(np.linalg.inv(H), cov_full[12:, 12:], atol=1e-10)


def test_nonlinear_marginalization_after_relinearization():
    g, truth = _chain_problem(np.random.default_rng(9))
    full = g.copy()
    full.optimize()
    g.optimize()
    g.marginalize([pose_key("b", 0), pose_key("b", 1)])
    g.optimize()
    for k in g.keys():
        assert pose_distance(g.values[k], full.values[k]) < 1e-6


def test_marginalize_rejects_outside_span():
    g, keys = _linear_chain(np.random.default_rng(10))
    with pytest.raises(GraphError):
        g.marginalize([keys[1]], keep=[keys[0]])


def test_singular_hbb_is_regularized_and_flagged():
    g = JointGraph()
    k0, k1 = bias_key("a", 0), bias_key("a", 1)
    g.add_variable(k0, np.zeros(6))
    g.add_variable(k1, np.zeros(6))
    g.add_factor(PriorFactor(k0, np.zeros(6), np.eye(6)))
    g.add_variable(velocity_key("a", 2), np.zeros(3))  # no factors: H_bb is zero
    info = g.marginalize([velocity_key("a", 2)])
    assert info.regularized
    assert velocity_key("a", 2) not in g


def test_dump_format():
    g, _, _ = _two_session_toy()
    lines = g.dump().splitlines()
    assert lines[0].startswith("VAR a:0:pose pose ")
    assert len(lines[0].split()) == 3 + 7
    fac = [l for l in lines if l.startswith("FACTOR")]
    assert fac[0].split()[1] == ANCHOR
    assert float(fac[0].split()[-1]) == 0.0


# --- Jacobians ------------------------------------------------------------

def numeric_jacobians(factor, values, eps=1e-6):
    out = []
    for k in factor.keys:
        J = np.zeros((factor.dim, k.dim))
        for d in range(k.dim):
            e = np.zeros(k.dim)
            e[d] = eps
            vp, vm = dict(values), dict(values)
            vp[k] = retract(k.kind, values[k], e)
            vm[k] = retract(k.kind, values[k], -e)
            J[:, d] = (factor.error(vp)[0] - factor.error(vm)[0]) / (2 * eps)
        out.append(J)
    return out


def imu_series(rng):
    t = np.arange(21) * 0.01
    w = rng.normal(0, 0.5, 3) + np.outer(np.sin(t), rng.normal(0, 0.2, 3))
    a = rng.normal([0, 0, 9.81], 1.0) + np.outer(np.cos(t), rng.normal(0, 0.5, 3))
    return ImuSeries(t, w, a)


def random_factor(kind, rng):
    ki, kj = pose_key("a", 0), pose_key("b", 1)
    if kind in ("anchor-prior", "state-prior-pose"):
        f = PriorFactor(ki, random_pose(rng), pose_information(0.1, 0.1), kind="anchor-prior")
        return f, {ki: f.measured.compose(Pose(Rotation.exp(rng.normal(0, 0.5, 3)), rng.normal(0, 1, 3)))}
    if kind == "state-prior":
        kv = velocity_key("a", 0)
        return PriorFactor(kv, rng.normal(size=3), np.eye(3)), {kv: rng.normal(size=3)}
    if kind in ("odometry-between", "scan-match"):
        f = BetweenFactor(ki, kj, random_pose(rng), pose_information(0.1, 0.05), kind=kind)
        return f, {ki: random_pose(rng), kj: random_pose(rng)}
    if kind == "bias-walk":
        a, b = bias_key("a", 0), bias_key("a", 1)
        return BiasWalkFactor(a, b, np.eye(6)), {a: rng.normal(size=6), b: rng.normal(size=6)}
    if kind == "preintegration":
        d = integrate(imu_series(rng), rng.normal(0, 0.05, 3), rng.normal(0, 0.01, 3), noise=ImuNoise())
        si = NavState(random_pose(rng), rng.normal(0, 2, 3), rng.normal(0, 0.05, 3), rng.normal(0, 0.01, 3))
        sj = predict(si, d)
        keys = [pose_key("b", 0), velocity_key("b", 0), bias_key("b", 0), pose_key("b", 1), velocity_key("b", 1)]
        vals = [si.pose, si.velocity, np.r_[si.bias_accel, si.bias_gyro],
                sj.pose.compose(Pose(Rotation.exp(rng.normal(0, 0.05, 3)), rng.normal(0, 0.1, 3))),
                sj.velocity + rng.normal(0, 0.1, 3)]
        return ImuFactor(*keys, d), dict(zip(keys, vals))
    if kind == "marginal-prior":
        keys = [pose_key("a", 0), velocity_key("a", 0), bias_key("a", 0)]
        lin = {keys[0]: random_pose(rng), keys[1]: rng.normal(size=3), keys[2]: rng.normal(size=6)}
        f = MarginalPriorFactor(keys, lin, random_spd(rng, 15), rng.normal(size=15))
        vals = {keys[0]: lin[keys[0]].compose(Pose(Rotation.exp(rng.normal(0, 0.5, 3)), rng.normal(0, 1, 3))),
                keys[1]: rng.normal(size=3), keys[2]: rng.normal(size=6)}
        return f, vals
    raise AssertionError(kind)


@pytest.mark.parametrize("kind", ["anchor-prior", "state-prior", "odometry-between", "scan-match",
                                  "bias-walk", "preintegration", "marginal-prior"])
def test_factor_jacobians_match_finite_differences(kind):
    rng = np.random.default_rng(sum(map(ord, kind)))
    worst = 0.0
    for _ in range(50):
        f, vals = random_factor(kind, rng)
        _, Js = f.error(vals)
        for Ja, Jn in zip(Js, numeric_jacobians(f, vals)):
            worst = max(worst, np.abs(Ja - Jn).max() / max(1.0, np.abs(Jn).max()))
    assert worst < 1e-4
