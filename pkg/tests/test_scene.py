import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from evsplat.errors import InvalidParameterError
from evsplat.scene import (
    LOWPASS_FLOOR,
    CameraModel,
    GaussianCloud,
    SE3Pose,
    covariance_from_params,
    eval_sh,
    project_covariance,
    quat_to_rotmat,
    so3_exp,
)

from oracles import project_one, sh_basis


def random_quat(rng):
    q = rng.normal(size=4)
    return q / np.linalg.norm(q)


def test_covariance_identity():
    assert np.allclose(covariance_from_params([0, 0, 0], [1, 0, 0, 0]), np.eye(3))


def test_covariance_scaled_axis():
    cov = covariance_from_params([np.log(2.0), 0, 0], [1, 0, 0, 0])
    assert np.allclose(cov, np.diag([4.0, 1.0, 1.0]))


def test_covariance_eigenvalues():
    rng = np.random.default_rng(1)
    for _ in range(50):
        s = rng.uniform(-3, 1, 3)
        cov = covariance_from_params(s, random_quat(rng))
        assert np.allclose(cov, cov.T)
        np.linalg.cholesky(cov)
        ev = np.linalg.eigvalsh(cov)
        assert np.allclose(np.sort(ev), np.sort(np.exp(2 * s)), rtol=1e-10, atol=1e-14)


def test_covariance_zero_quaternion():
    with pytest.raises(InvalidParameterError):
        covariance_from_params([0, 0, 0], [0, 0, 0, 0])


def test_quaternion_convention_matches_scipy():
    rng = np.random.default_rng(2)
    q = random_quat(rng)
    ref = Rotation.from_quat([q[1], q[2], q[3], q[0]]).as_matrix()
    assert np.allclose(quat_to_rotmat(q), ref, atol=1e-12)


def _camera(f=50.0, size=64):
    K = np.array([[f, 0, (size - 1) / 2], [0, f, (size - 1) / 2], [0, 0, 1.0]])
    return CameraModel(K, size, size, 0.1, 100.0)


def test_project_covariance_on_axis():
    cam = _camera(f=50.0)
    d = 5.0
    out = project_covariance(np.eye(3), SE3Pose.identity(), cam, [0, 0, d])
    expect = (50.0 / d) ** 2 + LOWPASS_FLOOR
    assert np.allclose(out, np.diag([expect, expect]))


def test_project_covariance_zero_gives_floor():
    out = project_covariance(np.zeros((3, 3)), SE3Pose.identity(), _camera(), [0.1, -0.2, 3.0])
    assert np.allclose(out, LOWPASS_FLOOR * np.eye(2))


def test_project_covariance_culls_behind():
    assert project_covariance(np.eye(3), SE3Pose.identity(), _camera(), [0, 0, -1.0]) is None


def test_project_covariance_dense_oracle():
    rng = np.random.default_rng(3)
    cam = _camera()
    for _ in range(20):
        s = rng.uniform(-2, -0.5, 3)
        q = random_quat(rng)
        pose = SE3Pose(so3_exp(rng.normal(0, 0.2, 3)), rng.normal(0, 0.2, 3) + [0, 0, 4])
        mean = rng.normal(0, 0.3, 3)
        cloud = GaussianCloud(mean[None], s[None], q[None], np.zeros(1), np.zeros((1, 1, 3)), 0)
        ref = project_one(cloud, 0, pose, cam)[1]
        got = project_covariance(covariance_from_params(s, q), pose, cam, mean)
        assert np.allclose(got, ref, rtol=1e-10, atol=1e-12)


def test_project_covariance_roll_equivariance():
    rng = np.random.default_rng(4)
    size = 64
    f = 60.0
    K = np.array([[f, 0, (size - 1) / 2], [0, f, (size - 1) / 2], [0, 0, 1.0]])
    cam = CameraModel(K, size, size, 0.1, 100.0)
    cov = covariance_from_params(rng.uniform(-1, 0, 3), random_quat(rng))
    mean = np.array([0.0, 0.0, 5.0])
    base = project_covariance(cov, SE3Pose.identity(), cam, mean) - LOWPASS_FLOOR * np.eye(2)
    for theta in (0.3, 1.1, -2.0):
        Rz = so3_exp([0, 0, theta])
        rolled = project_covariance(cov, SE3Pose(Rz, np.zeros(3)), cam, mean) - LOWPASS_FLOOR * np.eye(2)
        R2 = Rz[:2, :2]
        assert np.allclose(rolled, R2 @ base @ R2.T, atol=1e-10)


def test_sh_degree0_constant():
    rng = np.random.default_rng(5)
    block = rng.normal(size=(1, 3))
    dirs = rng.normal(size=(1000, 3))
    cols = np.array([eval_sh(block, d, 0) for d in dirs])
    assert np.all(cols == cols[0])


def test_sh_degree1_odd_parity():
    rng = np.random.default_rng(6)
    block = rng.normal(0, 0.1, size=(4, 3))
    block[0] = 1.0  # keep the result away from the clamp
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    band1 = sh_basis(d, 1)[1:] @ block[1:4]
    assert np.allclose(eval_sh(block, d, 1) - eval_sh(block, -d, 1), 2 * band1, atol=1e-12)


@pytest.mark.parametrize("degree", [1, 2, 3])
def test_sh_matches_scipy_basis(degree):
    rng = np.random.default_rng(7 + degree)
    for _ in range(20):
        block = rng.normal(0, 0.3, size=(16, 3))
        d = rng.normal(size=3)
        ref = np.maximum(sh_basis(d, degree) @ block[:(degree + 1) ** 2] + 0.5, 0.0)
        assert np.allclose(eval_sh(block, d, degree), ref, atol=1e-10)


def test_sh_zero_direction_does_not_fail():
    assert np.all(np.isfinite(eval_sh(np.zeros((4, 3)), [0, 0, 0], 1)))


def test_sh_degree_needs_coefficients():
    with pytest.raises(InvalidParameterError):
        eval_sh(np.zeros((1, 3)), [0, 0, 1], 1)


def test_pose_invariants_and_look_at():
    pose = SE3Pose.look_at([4, 0, 1], [0, 0, 0])
    pose.check()
    assert np.allclose(pose.transform(np.zeros(3))[:2], 0, atol=1e-12)
    assert pose.transform(np.zeros(3))[2] > 0
    assert np.allclose(pose.camera_center(), [4, 0, 1])
    inv = pose.inverse()
    assert np.allclose(pose.compose(inv).matrix(), np.eye(4), atol=1e-12)


def test_camera_rejects_bad_depth_range():
    K = np.array([[10.0, 0, 4], [0, 10.0, 4], [0, 0, 1]])
    with pytest.raises(Exception):
        CameraModel(K, 8, 8, 2.0, 1.0)


def test_cloud_length_mismatch_rejected():
    with pytest.raises(Exception):
        GaussianCloud(np.zeros((2, 3)), np.zeros((1, 3)), np.tile([1.0, 0, 0, 0], (2, 1)),
                      np.zeros(2), np.zeros((2, 1, 3)), 0)
