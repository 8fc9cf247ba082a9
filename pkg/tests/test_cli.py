import numpy as np
import pytest

from liloc.cli import EXIT_INIT, EXIT_INPUT, EXIT_OK, main
from liloc.config import RunConfig
from liloc.odometry import Keyframe
from liloc.pointcloud import voxel_downsample
from liloc.session import SessionStore
from liloc.simulator import simulate
from liloc.trajectory_io import read_tum, write_tum


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A ground-truth central store around the campus start and a short raw subsidiary session."""
    root = tmp_path_factory.mktemp("cli")
    sess = simulate("campus-loop", 0)
    gt = sess.ground_truth()
    c = RunConfig()
    store = SessionStore("a", c)
    for n, i in enumerate(range(0, 160, 4)):
        store.add_keyframe(Keyframe(n, voxel_downsample(sess.scan(i).without_times(), c.map_leaf), gt[i], gt[i].timestamp))
        store.try_generate_submap()
    store.seal()
    store.save(root / "central")
    simulate("campus-loop", 0, "subsidiary").write(root / "sub", limit=40)
    return root


def test_localize_writes_all_outputs(workspace, capsys):
    out = workspace / "run"
    code = main(["localize", str(workspace / "central"), str(workspace / "sub"), str(out)])
    assert code == EXIT_OK
    for name in ("traj_est.tum", "report.txt", "timings.csv", "trajectory.dat"):
        assert (out / name).is_file()
    assert (out / "map" / "submaps.idx").is_file()
    report = (out / "report.txt").read_text()
    for section in ("[mode timeline]", "[factor counts]", "[window sizes]", "[ate]"):
        assert section in report
    assert "xyz_rmse_m" in report
    est = read_tum(out / "traj_est.tum")
    assert len(est) == len((out / "timings.csv").read_text().splitlines()) - 1
    assert main(["evaluate", str(out / "traj_est.tum"), str(workspace / "sub" / "ground_truth.tum")]) == EXIT_OK
    rmse = float(capsys.readouterr().out.split("xyz_rmse_m")[-1].split()[0])
    assert rmse < 0.15


def test_evaluate_shift(tmp_path, capsys):
    gt = read_tum_sample(tmp_path)
    est = [p.__class__(p.rotation, p.translation + [1.0, 0.0, 0.0], p.timestamp) for p in gt]
    write_tum(tmp_path / "est.tum", est)
    assert main(["evaluate", str(tmp_path / "est.tum"), str(tmp_path / "gt.tum")]) == EXIT_OK
    assert "xyz_rmse_m 1.000000" in capsys.readouterr().out


def read_tum_sample(tmp_path):
    gt = simulate("corridor", 0).ground_truth()[:20]
    write_tum(tmp_path / "gt.tum", gt)
    return read_tum(tmp_path / "gt.tum")


def test_evaluate_without_matches_is_input_error(tmp_path):
    gt = read_tum_sample(tmp_path)
    write_tum(tmp_path / "est.tum", [p.with_timestamp(p.timestamp + 500.0) for p in gt])
    assert main(["evaluate", str(tmp_path / "est.tum"), str(tmp_path / "gt.tum")]) == EXIT_INPUT


def test_empty_input_directory_is_input_error(tmp_path):
    (tmp_path / "empty").mkdir()
    assert main(["build-central", str(tmp_path / "empty"), str(tmp_path / "out")]) == EXIT_INPUT
    assert main(["localize", str(tmp_path / "empty"), str(tmp_path / "empty"), str(tmp_path / "o")]) == EXIT_INPUT


def test_bad_config_is_input_error(tmp_path, workspace):
    (tmp_path / "bad.cfg").write_text("n_s = -3\n")
    code = main(["localize", "--config", str(tmp_path / "bad.cfg"), str(workspace / "central"),
                 str(workspace / "sub"), str(tmp_path / "o")])
    assert code == EXIT_INPUT


def test_initialization_failure_exit_code(workspace, tmp_path):
    code = main(["localize", "--init-x", "900", "--init-y", "900", "--init-yaw", "0",
                 str(workspace / "central"), str(workspace / "sub"), str(tmp_path / "o")])
    assert code == EXIT_INIT


def test_partial_init_flags_rejected(workspace, tmp_path):
    code = main(["localize", "--init-x", "1", str(workspace / "central"), str(workspace / "sub"), str(tmp_path / "o")])
    assert code == EXIT_INPUT


def test_simulate_limit(tmp_path):
    assert main(["simulate", "--sim", "corridor", "--limit", "3", str(tmp_path / "raw")]) == EXIT_OK
    assert len((tmp_path / "raw" / "scans.txt").read_text().splitlines()) == 3
    assert len(read_tum(tmp_path / "raw" / "ground_truth.tum")) == 3
