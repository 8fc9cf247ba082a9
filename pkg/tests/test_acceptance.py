"""Acceptance criteria 1 to 10, each at its stated tolerance.

The end-to-end fixtures are module scoped: the campus central map, the
subsidiary front-end keyframes and the two-session runs are computed once
and shared between criteria. A summary line per criterion is printed at the
end of the pytest run.
"""

import math
import time

import numpy as np
import pytest

from liloc.cli import main as cli_main
from liloc.config import RunConfig
from liloc.descriptor import descriptor_distance, encode
from liloc.evaluation import ate
from liloc.factorgraph import SCAN_MATCH, SolverParams
from liloc.geometry import Pose, Rotation, so3_log
from liloc.imu import integrate
from liloc.odometry import Keyframe
from liloc.pipeline import (
    DRIFT_SCENARIO,
    Localizer,
    build_central,
    coarse_guess,
    initialize,
    run_backend,
    run_frontend,
    transitions,
)
from liloc.pointcloud import PointCloud, icp, ndt, voxel_downsample
from liloc.session import ILM, RLM, SessionStore
from liloc.simulator import SensorRig, Trajectory, generate_world, raycast_scan, simulate
from test_factorgraph import (
    _chain_problem,
    _dense_gn_oracle,
    _dense_linear_solution,
    _linear_chain,
    numeric_jacobians,
    pose_distance,
    random_factor,
)
from test_imu import rk4_oracle, sampled

STRIDE = 2  # every other LiDAR sweep reaches the front-end in the end-to-end runs
FACTOR_KINDS = ["anchor-prior", "state-prior", "odometry-between", "scan-match", "bias-walk",
                "preintegration", "marginal-prior"]


def crit(number, title):
    return pytest.mark.criterion(number, title)


def _rmse(est, gt_by_time, keep=None):
    e = [np.linalg.norm(p.translation - gt_by_time[round(p.timestamp, 6)].translation)
         for p in est if keep is None or keep(gt_by_time[round(p.timestamp, 6)])]
    return float(np.sqrt(np.mean(np.square(e)))), float(np.max(e)), len(e)


# --- shared end-to-end runs -----------------------------------------------------------------


@pytest.fixture(scope="module")
def campus():
    """Campus central map, subsidiary front-end keyframes, and the drift-scenario config."""
    cfg = RunConfig(frontend_stride=STRIDE)
    central = simulate("campus-loop", 0, "central")
    store, _ = build_central(central, cfg, central.ground_truth()[0])
    sub = simulate("campus-loop", 0, "subsidiary")
    gt = sub.ground_truth()
    drift = cfg.replace(**DRIFT_SCENARIO)
    init = initialize(sub, store, coarse_guess(gt[0], drift), drift)
    t0 = time.perf_counter()
    keyframes = run_frontend(sub, drift, init.pose)
    frontend_s = time.perf_counter() - t0
    return {"config": drift, "store": store, "sub": sub, "gt": {round(p.timestamp, 6): p for p in gt},
            "keyframes": keyframes, "frontend_s": frontend_s, "init": init}


@pytest.fixture(scope="module")
def campus_propagation(campus):
    t0 = time.perf_counter()
    loc = run_backend(campus["keyframes"], campus["config"], campus["sub"].imu, campus["store"], "b")
    return loc, time.perf_counter() - t0


@pytest.fixture(scope="module")
def two_session():
    cfg = RunConfig(frontend_stride=STRIDE)
    a = simulate("two-session-overlap", 0, "central")
    store, _ = build_central(a, cfg, a.ground_truth()[0])
    b = simulate("two-session-overlap", 0, "subsidiary")
    gt = b.ground_truth()
    init = initialize(b, store, coarse_guess(gt[0], cfg), cfg)
    keyframes = run_frontend(b, cfg, init.pose)
    loc = Localizer(cfg, b.imu, store, "b")
    in_graph = []
    for fk in keyframes:
        loc.step(fk)
        in_graph.append(sum(f.kind == SCAN_MATCH for f in loc.graph.factors))
    loc.finish()
    return loc, in_graph, cfg


# --- 1 ----------------------------------------------------------------------------------------


@crit(1, "default constants")
def test_c1_default_constants(record_property):
    c = RunConfig()
    got = dict(n_s=c.n_s, h_p=c.h_p, n_a=c.n_a, n_r=c.n_r, n_d=c.n_d, n_m_r=c.n_m_r, n_m_l=c.n_m_l, h_o=c.h_o)
    record_property("measured", " ".join(f"{k}={v}" for k, v in got.items()))
    assert got == dict(n_s=20, h_p=20.0, n_a=60, n_r=20, n_d=3, n_m_r=5, n_m_l=10, h_o=0.7)


# --- 2 ----------------------------------------------------------------------------------------


@crit(2, "oracle equivalences: preintegration/RK4, Schur/full solve, solver/dense GN")
def test_c2_oracle_equivalences(record_property):
    t0 = time.perf_counter()
    d = integrate(sampled(0.0, 2.0))
    R, v, p = rk4_oracle(0.0, 2.0)
    rot_err = float(np.linalg.norm(so3_log(d.delta_R.T @ R)))
    pos_err = float(np.linalg.norm(d.delta_P - p))

    rng = np.random.default_rng(8)
    schur_err = 0.0
    for n in (4, 6, 8):
        g, keys = _linear_chain(rng, n)
        x_full, _ = _dense_linear_solution(g, keys)
        g.marginalize(keys[:2])
        g.optimize(SolverParams(max_iterations=1))
        kept = np.concatenate([g.values[k] for k in keys[2:]])
        schur_err = max(schur_err, float(np.abs(kept - x_full[12:]).max()))

    rng = np.random.default_rng(3)
    gn_err = 0.0
    for _ in range(3):
        g, _ = _chain_problem(rng, 10)
        oracle = _dense_gn_oracle(g.copy())
        g.optimize()
        gn_err = max(gn_err, max(pose_distance(g.values[k], oracle[k]) for k in g.keys()))
    elapsed = time.perf_counter() - t0
    record_property("measured", f"rk4 rot {rot_err:.1e} rad pos {pos_err:.1e} m; schur {schur_err:.1e}; "
                                f"gn {gn_err:.1e}; {elapsed:.1f} s")
    assert rot_err < 1e-4 and pos_err < 1e-3
    assert schur_err < 1e-10
    assert gn_err < 1e-6
    assert elapsed < 10.0


# --- 3 ----------------------------------------------------------------------------------------


@crit(3, "analytic Jacobians vs central differences, every factor kind")
def test_c3_jacobian_suite(record_property):
    t0 = time.perf_counter()
    worst = {}
    for kind in FACTOR_KINDS:
        rng = np.random.default_rng(1000 + sum(map(ord, kind)))
        w = 0.0
        for _ in range(50):
            f, vals = random_factor(kind, rng)
            _, Js = f.error(vals)
            for Ja, Jn in zip(Js, numeric_jacobians(f, vals, eps=1e-6)):
                w = max(w, float(np.abs(Ja - Jn).max() / max(1.0, np.abs(Jn).max())))
        worst[kind] = w
    elapsed = time.perf_counter() - t0
    record_property("measured", f"worst relative {max(worst.values()):.1e}; {elapsed:.1f} s")
    assert all(w < 1e-4 for w in worst.values()), worst
    assert elapsed < 30.0


# --- 4 ----------------------------------------------------------------------------------------


def _registration_trials(n=100):
    """Pairs of independent noisy sweeps from one campus pose, the source moved by a known
    rigid transform of at most 0.3 m and 5 degrees."""
    world = generate_world(0, "campus-loop")
    traj = Trajectory.from_route(world.routes["loop"])
    rig = SensorRig(range_noise=0.02)
    rng = np.random.default_rng(2024)
    for k in range(n):
        at = traj.pose(rng.uniform(0.0, traj.duration))
        yaw = math.radians(rng.uniform(-5.0, 5.0))
        heading = rng.uniform(0.0, 2.0 * math.pi)
        offset = np.array([math.cos(heading), math.sin(heading), 0.0]) * rng.uniform(0.0, 0.3)
        D = Pose(Rotation.yaw(yaw), offset)
        target = raycast_scan(world, at, rig, np.random.default_rng([k, 0]))
        second = raycast_scan(world, at, rig, np.random.default_rng([k, 1]))
        yield target, PointCloud(D.inverse().apply(second.points)), D


@crit(4, "ICP and NDT recover known transforms in >= 95% of 100 trials")
def test_c4_registration_recovery(record_property):
    t0 = time.perf_counter()
    ok = {"icp": 0, "ndt": 0}
    for target, source, D in _registration_trials():
        src = voxel_downsample(source, 0.5)
        for name, res in (("icp", icp(src, target)), ("ndt", ndt(src, voxel_downsample(target, 0.2)))):
            E = res.transform.inverse().compose(D)
            if np.linalg.norm(E.translation) < 0.05 and math.degrees(E.rotation.angle()) < 0.5:
                ok[name] += 1
    elapsed = time.perf_counter() - t0
    record_property("measured", f"icp {ok['icp']}/100 ndt {ok['ndt']}/100; {elapsed:.1f} s")
    assert ok["icp"] >= 95 and ok["ndt"] >= 95
    assert elapsed < 60.0


# --- 5 ----------------------------------------------------------------------------------------


@crit(5, "descriptor column-shift covariance and revisit recall >= 90%")
def test_c5_descriptor(record_property):
    central = simulate("campus-loop", 0, "central")
    scan = voxel_downsample(central.scan(60).without_times(), 0.4)
    # a quarter-beam offset keeps returns off the sector boundaries
    base = scan.transformed(Pose(Rotation.yaw(math.radians(0.25)), np.zeros(3)))
    a = encode(base)
    exact = 0
    for k in range(60):
        b = encode(base.transformed(Pose(Rotation.yaw(k * 2.0 * math.pi / 60), np.zeros(3))))
        exact += bool(np.array_equal(b.occupancy, np.roll(a.occupancy, k, axis=1))
                      and descriptor_distance(a, b) == (0, k))

    sub = simulate("campus-loop", 0, "subsidiary")
    gta, gtb = central.ground_truth(), sub.ground_truth()
    db = list(range(0, len(gta), 12))
    db_desc = [encode(voxel_downsample(central.scan(i), 0.4)) for i in db]
    db_pos = np.array([gta[i].translation for i in db])
    on_loop = [j for j in range(len(gtb)) if gtb[j].translation[1] > -1.0]
    queries = on_loop[5::max(1, len(on_loop) // 22)][:20]
    hits = 0
    for j in queries:
        q = encode(voxel_downsample(sub.scan(j), 0.4))
        best = int(np.argmin([descriptor_distance(d, q)[0] for d in db_desc]))
        hits += best == int(np.argmin(np.linalg.norm(db_pos - gtb[j].translation, axis=1)))
    record_property("measured", f"exact shifts {exact}/60; recall {hits}/{len(queries)}")
    assert exact == 60
    assert len(queries) == 20 and hits >= 18


# --- 6 ----------------------------------------------------------------------------------------


@pytest.mark.slow
@crit(6, "ILM->RLM exactly at first overlap >= 0.7; scan matches only in RLM")
def test_c6_mode_switching(two_session, record_property):
    loc, in_graph, cfg = two_session
    recs = loc.records
    back = [(a, b, k) for a, b, k in transitions(recs) if a == ILM and b == RLM]
    record_property("measured", f"ILM->RLM at {[k for *_, k in back]}, overlaps "
                                f"{[round(r.overlap, 3) for r in recs if (ILM, RLM, r.index) in back]}")
    assert back
    for r in recs:
        assert (r.mode == RLM) == (r.overlap >= cfg.h_o and r.submap_id is not None)
    for _, _, k in back:
        i = [r.index for r in recs].index(k)
        assert recs[i].overlap >= cfg.h_o and recs[i - 1].overlap < cfg.h_o
    for r, n in zip(recs, in_graph):
        if r.mode == ILM:
            assert n == 0 and r.scan_match == 0


# --- 7 ----------------------------------------------------------------------------------------


@pytest.mark.slow
@crit(7, "mapped loop RMSE < 0.15 m, unmapped extension < 0.5 m")
def test_c7_end_to_end(campus, campus_propagation, record_property):
    loc, backend_s = campus_propagation
    region = campus["sub"].world.regions["extension"]  # xmin, ymin, xmax, ymax

    def in_extension(p):
        x, y = p.translation[:2]
        return region[0] <= x <= region[2] and region[1] <= y <= region[3]

    mapped, _, n_mapped = _rmse(loc.trajectory(), campus["gt"], lambda g: not in_extension(g))
    ext, ext_max, n_ext = _rmse(loc.trajectory(), campus["gt"], in_extension)
    runtime = campus["frontend_s"] + backend_s
    record_property("measured", f"mapped {mapped:.3f} m over {n_mapped} kf; extension rmse {ext:.3f} "
                                f"max {ext_max:.3f} m over {n_ext} kf; {runtime:.0f} s")
    assert n_ext > 0 and n_mapped > 0
    assert mapped < 0.15
    assert ext_max < 0.5
    assert runtime < 300.0


# --- 8 ----------------------------------------------------------------------------------------


@pytest.mark.slow
@crit(8, "propagation RMSE <= single-edge baseline on the drift scenario")
def test_c8_propagation_ab(campus, campus_propagation, record_property):
    loc, _ = campus_propagation
    t0 = time.perf_counter()
    base = run_backend(campus["keyframes"], campus["config"].replace(ab_baseline=True), campus["sub"].imu,
                       campus["store"], "b")
    elapsed = time.perf_counter() - t0
    gt = list(campus["gt"].values())
    prop_r, base_r = ate(loc.trajectory(), gt).xyz_rmse, ate(base.trajectory(), gt).xyz_rmse
    record_property("measured", f"propagation {prop_r:.5f} m vs baseline {base_r:.5f} m; "
                                f"JFGO {np.mean([r.optimize_ms for r in loc.records]):.1f} vs "
                                f"{np.mean([r.optimize_ms for r in base.records]):.1f} ms/frame")
    assert prop_r <= base_r
    assert campus["frontend_s"] + elapsed < 300.0


# --- 9 ----------------------------------------------------------------------------------------


def _window_violations(records, cfg):
    """Steps whose retained count differs from N_m of the mode, capped by the states available."""
    bad, prev = [], 0
    for r in records:
        target = cfg.n_m_r if r.mode == RLM else cfg.n_m_l
        if r.window != min(target, prev + 1):
            bad.append(r.index)
        prev = r.window
    return bad


@pytest.mark.slow
@crit(9, "window sizes 5/10 and marginalized vs full graph within 1e-3 m over 50 keyframes")
def test_c9_window_discipline(campus, campus_propagation, record_property):
    cfg = campus["config"]
    loc, _ = campus_propagation
    full_run_bad = _window_violations(loc.records, cfg)
    diffs, modes = [], []
    for name, prior in (("relocalization", campus["store"]), ("incremental", None)):
        kfs = campus["keyframes"][:50]
        marg = run_backend(kfs, cfg, campus["sub"].imu, prior, "b")
        full = run_backend(kfs, cfg.replace(marginalize=False), campus["sub"].imu, prior, "b")
        assert not _window_violations(marg.records, cfg)
        modes.append(f"{name} {sorted(set(r.mode for r in marg.records))}")
        diffs.append(max(np.linalg.norm(marg.estimates[k].translation - full.estimates[k].translation)
                         for k in marg.estimates))
    record_property("measured", f"window violations {len(full_run_bad)} over {len(loc.records)} steps; "
                                f"max diff {diffs[0]:.1e} / {diffs[1]:.1e} m ({'; '.join(modes)})")
    assert not full_run_bad
    assert max(diffs) < 1e-3


# --- 10 ---------------------------------------------------------------------------------------


@crit(10, "identical seed and config give byte-identical traj_est.tum")
def test_c10_determinism(tmp_path, record_property):
    sess = simulate("campus-loop", 0)
    gt = sess.ground_truth()
    c = RunConfig()
    store = SessionStore("a", c)
    for n, i in enumerate(range(0, 120, 4)):
        store.add_keyframe(Keyframe(n, voxel_downsample(sess.scan(i).without_times(), c.map_leaf), gt[i],
                                    gt[i].timestamp))
        store.try_generate_submap()
    store.seal()
    store.save(tmp_path / "central")
    simulate("campus-loop", 0, "subsidiary").write(tmp_path / "sub", limit=30)
    outs = []
    for run in ("one", "two"):
        code = cli_main(["localize", "--seed", "3", str(tmp_path / "central"), str(tmp_path / "sub"),
                         str(tmp_path / run)])
        assert code == 0
        outs.append((tmp_path / run / "traj_est.tum").read_bytes())
    record_property("measured", f"{len(outs[0])} bytes, identical={outs[0] == outs[1]}")
    assert outs[0] == outs[1]
