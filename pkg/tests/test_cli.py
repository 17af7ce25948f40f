import numpy as np
import pytest

from evsplat.cli import main
from evsplat.events import read_event_file
from evsplat.poserefine import read_pose_file, track_errors

SMALL = ["--set", "camera.width=24", "--set", "camera.height=24",
         "--set", "trajectory.duration_us=1000000", "--set", "trajectory.turns=0.1",
         "--set", "trajectory.heldout_views=2"]


@pytest.fixture(scope="module")
def sim(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    assert main(["simulate", "--out", str(out), *SMALL, "--set", "events.noise_rotation_deg=1"]) == 0
    return out


def test_simulate_outputs(sim):
    for name in ("events.evt", "poses.txt", "poses_gt.txt", "scene.evs", "config.ini",
                 "heldout/poses.txt", "heldout/view_000.raw", "heldout/view_001.png"):
        assert (sim / name).is_file(), name
    assert len(read_event_file(sim / "events.evt")) > 0
    rot, _ = track_errors(read_pose_file(sim / "poses.txt"), read_pose_file(sim / "poses_gt.txt"),
                          refined=False)
    assert rot.mean() > 0


def test_simulate_is_deterministic(sim, tmp_path):
    assert main(["simulate", "--out", str(tmp_path), *SMALL, "--set", "events.noise_rotation_deg=1"]) == 0
    for name in ("events.evt", "poses.txt", "heldout/view_000.raw"):
        assert (tmp_path / name).read_bytes() == (sim / name).read_bytes()


def test_full_orbit_smoke(tmp_path):
    args = ["--set", "camera.width=24", "--set", "camera.height=24", "--set", "trajectory.pose_rate_hz=9.9"]
    assert main(["simulate", "--out", str(tmp_path), *args]) == 0
    assert len(read_event_file(tmp_path / "events.evt")) > 0
    assert len(read_pose_file(tmp_path / "poses.txt")) == 100


def test_static_camera_gives_no_events(tmp_path):
    args = [*SMALL, "--set", "trajectory.turns=0", "--set", "trajectory.speed_ratio=0"]
    assert main(["simulate", "--out", str(tmp_path), *args]) == 0
    assert len(read_event_file(tmp_path / "events.evt")) == 0


def test_train_render_eval(sim, tmp_path, capsys):
    tr = tmp_path / "train"
    cam = SMALL[:4]
    assert main(["train", "--data", str(sim), "--out", str(tr), *cam,
                 "--set", "train.total_iters=10", "--set", "train.n_gaussians=100"]) == 0
    for name in ("state.evs", "cloud.evs", "metrics.jsonl", "poses_refined.txt", "config.ini"):
        assert (tr / name).is_file()
    assert main(["train", "--data", str(sim), "--out", str(tr), "--resume", str(tr / "state.evs"), *cam,
                 "--set", "train.total_iters=15", "--set", "train.n_gaussians=100"]) == 0
    assert "iteration 15" in capsys.readouterr().out

    assert main(["render", "--checkpoint", str(sim / "scene.evs"), "--poses", str(sim / "heldout/poses.txt"),
                 "--out", str(tmp_path / "r"), *cam]) == 0
    assert (tmp_path / "r/view_001.raw").read_bytes() == (sim / "heldout/view_001.raw").read_bytes()

    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(sim / "scene.evs"), "--views", str(sim / "heldout"), *cam]) == 0
    last = capsys.readouterr().out.strip().splitlines()[-1].split()
    assert last[0] == "mean" and float(last[1]) == 99.0 and float(last[2]) == pytest.approx(1.0)


def test_perturb_poses(sim, tmp_path, capsys):
    out = tmp_path / "noisy.txt"
    assert main(["perturb-poses", "--poses", str(sim / "poses_gt.txt"), "--out", str(out),
                 "--set", "events.noise_translation=0.05", "--set", "events.seed=3"]) == 0
    _, trans = track_errors(read_pose_file(out), read_pose_file(sim / "poses_gt.txt"), refined=False)
    assert trans.mean() > 0
    assert "mean rotation error" in capsys.readouterr().out


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--set", "gradcheck.scenes=2", "--set", "gradcheck.gaussians=4",
                 "--set", "gradcheck.size=8"]) == 0
    worst = float(capsys.readouterr().out.strip().splitlines()[-1].split()[1])
    assert worst < 1e-3


def test_usage_errors_exit_2(tmp_path, capsys):
    assert main(["train", "--out", str(tmp_path)]) == 2
    assert main(["gradcheck", "--set", "train.bogus=1"]) == 2
    assert main(["simulate", "--out", str(tmp_path), "--config", str(tmp_path / "none.ini")]) == 2
    assert main(["render", "--checkpoint", str(tmp_path / "none.evs"), "--poses", "x", "--out", "y"]) == 2
    assert "error" in capsys.readouterr().err
    with pytest.raises(SystemExit) as e:
        main(["frobnicate"])
    assert e.value.code == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_abort_exit_3(sim, tmp_path):
    assert main(["train", "--data", str(sim), "--out", str(tmp_path), *SMALL[:4],
                 "--set", "train.total_iters=5", "--set", "train.lr_scaling=1e300"]) == 3


def test_config_echo(sim):
    text = (sim / "config.ini").read_text()
    assert "[train]" in text and "width = 24" in text
    assert np.isclose(float(text.split("noise_rotation_deg = ")[1].split()[0]), 1.0)
