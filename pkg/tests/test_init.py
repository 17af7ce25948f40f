import numpy as np
import pytest
from scipy import stats

from evsplat.errors import ContractError
from evsplat.init import DEFAULT_NUM_GAUSSIANS, INIT_OPACITY, frustum_init, sample_frustum
from evsplat.poserefine import PoseTrack
from evsplat.scene import CameraModel, SE3Pose, sigmoid


def camera():
    return CameraModel.from_fov(32, 24, 50.0, z_near=1.5, z_far=7.0)


def orbit_track(n=12):
    poses = [SE3Pose.look_at([4 * np.cos(a), 4 * np.sin(a), 1.0], [0, 0, 0])
             for a in np.linspace(0, 2 * np.pi, n, endpoint=False)]
    return PoseTrack.from_poses(np.arange(n) * 1000, poses)


def reproject(points, pose, cam):
    xc = pose.transform(points)
    u = cam.fx * xc[:, 0] / xc[:, 2] + cam.cx
    v = cam.fy * xc[:, 1] / xc[:, 2] + cam.cy
    return u, v, xc[:, 2]


def test_containment_per_source_camera():
    cam = camera()
    track = orbit_track()
    cloud = frustum_init(track, cam, 1200, np.random.default_rng(0))
    per = 1200 // len(track)
    assert len(cloud) == per * len(track)
    for i in range(len(track)):
        u, v, z = reproject(cloud.means[i * per:(i + 1) * per], track.base_pose(i), cam)
        assert np.all((u >= -0.5) & (u <= cam.width - 0.5))
        assert np.all((v >= -0.5) & (v <= cam.height - 0.5))
        assert np.all((z >= cam.z_near - 1e-9) & (z <= cam.z_far + 1e-9))


def test_initial_attributes():
    cloud = frustum_init(orbit_track(), camera(), 600, np.random.default_rng(1))
    assert np.allclose(sigmoid(cloud.opacity_logits), INIT_OPACITY)
    assert np.all(cloud.rotations == [1, 0, 0, 0])
    assert not cloud.sh_coeffs.any()  # mid-gray after the +0.5 offset
    assert np.all(cloud.log_scales[:, 0] == cloud.log_scales[:, 1])


def test_default_count():
    assert DEFAULT_NUM_GAUSSIANS == 50_000


def test_depth_uniform_in_camera_space():
    cam = camera()
    pose = SE3Pose.look_at([0, -4, 0], [0, 0, 0])
    pts = sample_frustum(pose, cam, 10_000, np.random.default_rng(2))
    z = pose.transform(pts)[:, 2]
    ks = stats.kstest(z, stats.uniform(cam.z_near, cam.z_far - cam.z_near).cdf).statistic
    assert ks < 0.02
    near_half = np.mean(z <= 0.5 * (cam.z_near + cam.z_far))
    assert abs(near_half - 0.5) <= 0.02


def test_empty_track_rejected():
    empty = PoseTrack(np.zeros(0, np.int64), np.zeros((0, 3, 3)), np.zeros((0, 3)))
    with pytest.raises(ContractError):
        frustum_init(empty, camera(), 10, np.random.default_rng(0))


def test_too_few_gaussians_rejected():
    with pytest.raises(ContractError):
        frustum_init(orbit_track(12), camera(), 5, np.random.default_rng(0))


def test_long_tracks_are_subsampled():
    track = orbit_track(500)
    cloud = frustum_init(track, camera(), 1000, np.random.default_rng(3))
    assert len(cloud) == 1000  # 200 frusta x 5
