import numpy as np
import pytest

from evsplat.errors import ContractError, NumericError
from evsplat.gradcheck import check_scene, random_scene
from evsplat.projection import project
from evsplat.rasterizer import (
    DEFAULT_BACKGROUND,
    LOG_FLOOR,
    TILE,
    cull_and_bin,
    render,
    render_backward,
    set_threads,
)
from evsplat.scene import CameraModel, GaussianCloud, SE3Pose, logit
from evsplat.sh import rgb_to_dc
from evsplat.toy import random_cloud

import oracles


def small_scene(seed, n=5, size=8, sh_degree=1):
    rng = np.random.default_rng(seed)
    cloud = random_cloud(n, rng, sh_degree=sh_degree)
    camera = CameraModel.from_fov(size, size, 60.0, z_near=0.5, z_far=20.0)
    pose = SE3Pose.look_at(rng.normal(size=3) * 0.2 + [0, -4, 0.5], [0, 0, 0])
    return cloud, pose, camera


def test_empty_cloud_is_background():
    cam = CameraModel.from_fov(8, 8, 60.0)
    out = render(GaussianCloud.empty(), SE3Pose.look_at([0, -4, 0], [0, 0, 0]), cam)
    assert np.array_equal(out.linear_image, np.broadcast_to(DEFAULT_BACKGROUND, (8, 8, 3)))
    assert np.all(out.alpha_image == 0)
    assert len(out.visible_set) == 0


def test_saturated_single_gaussian():
    cam = CameraModel.from_fov(9, 9, 60.0, z_near=0.5, z_far=20.0)
    pose = SE3Pose.identity()
    c = np.array([0.2, 0.5, 0.9])
    cloud = GaussianCloud([[0, 0, 4.0]], np.log([[0.3, 0.3, 0.3]]), [[1, 0, 0, 0]], [40.0],
                          rgb_to_dc(c)[None, None, :], 0)
    bg = np.array([0.1, 0.2, 0.3])
    out = render(cloud, pose, cam, bg)
    assert np.allclose(out.linear_image[4, 4], 0.99 * c + 0.01 * bg, atol=1e-9)


@pytest.mark.parametrize("seed", range(10))
def test_matches_brute_force(seed):
    cloud, pose, cam = small_scene(seed)
    bg = np.array([0.3, 0.4, 0.5])
    out = render(cloud, pose, cam, bg)
    ref, alpha = oracles.composite(cloud, pose, cam, bg)
    assert np.abs(out.linear_image - ref).max() < 1e-6
    assert np.abs(out.alpha_image - alpha).max() < 1e-6


def test_multi_tile_matches_brute_force():
    rng = np.random.default_rng(11)
    cloud = random_cloud(30, rng, sh_degree=2, log_scale=(-2.5, -1.5))
    cam = CameraModel.from_fov(40, 24, 60.0, z_near=0.5, z_far=20.0)
    pose = SE3Pose.look_at([0.3, -3.0, 0.4], [0, 0, 0])
    out = render(cloud, pose, cam)
    ref, _ = oracles.composite(cloud, pose, cam, DEFAULT_BACKGROUND)
    assert np.abs(out.linear_image - ref).max() < 1e-6


def test_log_image_floor():
    cloud, pose, cam = small_scene(3)
    out = render(cloud, pose, cam, np.zeros(3))
    assert np.array_equal(out.log_image, np.log(np.maximum(out.linear_image, LOG_FLOOR)))
    assert out.alpha_image.min() >= 0 and out.alpha_image.max() <= 1


def test_nonfinite_parameter_named():
    cloud, pose, cam = small_scene(4)
    cloud.means[3, 1] = np.nan
    with pytest.raises(NumericError, match="Gaussian 3"):
        render(cloud, pose, cam)


def test_bins_match_overlap_oracle():
    rng = np.random.default_rng(12)
    cloud = random_cloud(40, rng, log_scale=(-2.5, -1.0))
    cam = CameraModel.from_fov(48, 40, 60.0, z_near=0.5, z_far=20.0)
    pose = SE3Pose.look_at([0.2, -3.5, 0.3], [0, 0, 0])
    bins = cull_and_bin(cloud, pose, cam)
    got = set()
    for ty in range(bins.tiles_y):
        for tx in range(bins.tiles_x):
            lst = bins.tile_list(tx, ty)
            assert len(set(lst)) == len(lst)
            got.update((tx, ty, int(g)) for g in lst)
    assert got == oracles.tile_overlaps(cloud, pose, cam, TILE)


def test_bins_behind_and_covering():
    cam = CameraModel.from_fov(48, 48, 60.0, z_near=0.5, z_far=20.0)
    cloud = GaussianCloud([[0, 0, -3.0], [0, 0, 3.0]], np.log([[0.1] * 3, [5.0] * 3]),
                          [[1, 0, 0, 0]] * 2, [0.0, 0.0], np.zeros((2, 1, 3)), 0)
    bins = cull_and_bin(cloud, SE3Pose.identity(), cam)
    for ty in range(bins.tiles_y):
        for tx in range(bins.tiles_x):
            assert list(bins.tile_list(tx, ty)) == [1]


def test_compositing_bound():
    rng = np.random.default_rng(13)
    for seed in range(5):
        cloud, pose, cam = small_scene(100 + seed, n=15, size=16)
        bg = rng.uniform(0, 1, 3)
        out = render(cloud, pose, cam, bg)
        colors = project(cloud, pose, cam).color
        bound = np.maximum(colors.max(axis=0), bg)
        assert np.all(out.linear_image <= bound + 1e-12)


def test_alpha_monotone_in_opacity():
    # Early termination can drop the last sliver of coverage (below 1e-4),
    # so monotonicity holds up to that transmittance floor.
    cloud, pose, cam = small_scene(21, n=15, size=16)
    base = render(cloud, pose, cam).alpha_image
    for g in range(len(cloud)):
        c = cloud.copy()
        c.opacity_logits[g] += 1.0
        assert np.all(render(c, pose, cam).alpha_image >= base - 1e-4)


def test_deterministic_and_thread_independent():
    cloud, pose, cam = small_scene(5, n=40, size=40)
    a = render(cloud, pose, cam).linear_image
    b = render(cloud, pose, cam).linear_image
    assert np.array_equal(a, b)
    set_threads(1)
    try:
        c = render(cloud, pose, cam).linear_image
    finally:
        set_threads(64)
    assert np.abs(a - c).max() <= 1e-6


def test_backward_zero_input():
    cloud, pose, cam = small_scene(6)
    g = render_backward(cloud, pose, cam, d_log_image=np.zeros((8, 8, 3)))
    for v in g.as_dict().values():
        assert not v.any()
    assert not g.d_pose.any()


def test_backward_shape_mismatch():
    cloud, pose, cam = small_scene(7)
    with pytest.raises(ContractError):
        render_backward(cloud, pose, cam, d_log_image=np.zeros((4, 4, 3)))


def test_backward_shapes_and_finite():
    cloud, pose, cam = small_scene(8, n=10)
    g = render_backward(cloud, pose, cam, d_log_image=np.ones((8, 8, 3)))
    for name, v in g.as_dict().items():
        assert v.shape == getattr(cloud, name).shape
        assert np.all(np.isfinite(v))
    assert g.d_pose.shape == (6,)


def test_single_gaussian_single_pixel_opacity_gradient():
    cam = CameraModel.from_fov(1, 1, 30.0, z_near=0.5, z_far=20.0)
    cloud = GaussianCloud([[0.01, -0.02, 4.0]], np.log([[0.2] * 3]), [[1, 0, 0, 0]], [logit(0.6)],
                          rgb_to_dc(np.array([[0.7, 0.3, 0.5]]))[:, None, :], 0)
    pose = SE3Pose.identity()
    w = np.array([[[0.3, -1.0, 0.5]]])
    an = render_backward(cloud, pose, cam, d_log_image=w).d_opacity_logits[0]
    h = 1e-4
    p, m = cloud.copy(), cloud.copy()
    p.opacity_logits[0] += h
    m.opacity_logits[0] -= h
    fd = (np.sum(render(p, pose, cam).log_image * w) - np.sum(render(m, pose, cam).log_image * w)) / (2 * h)
    assert abs(fd - an) <= 1e-3 * abs(fd)


def test_random_scene_gradients():
    rng = np.random.default_rng(99)
    res = check_scene(*random_scene(rng, 8, 12))
    assert res.worst < 1e-3
    assert sum(res.checked.values()) > 0
