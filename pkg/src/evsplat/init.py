"""Random Gaussian initialization inside the camera frusta."""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .errors import ContractError
from .poserefine import PoseTrack
from .scene import CameraModel, GaussianCloud, logit
from .sh import num_basis

DEFAULT_NUM_GAUSSIANS = 50_000
MAX_FRUSTA = 200
INIT_OPACITY = 0.1


def depth_to_ndc(z, z_near: float, z_far: float):
    """OpenGL-style depth mapping [z_near, z_far] -> [-1, 1]."""
    return (z_far + z_near) / (z_far - z_near) - 2.0 * z_far * z_near / ((z_far - z_near) * z)


def ndc_to_depth(zn, z_near: float, z_far: float):
    return 2.0 * z_far * z_near / ((z_far + z_near) - zn * (z_far - z_near))


def sample_frustum(pose, camera: CameraModel, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` world points in one frustum: camera-space depth uniform on
    [z_near, z_far], image position uniform over the pixel area."""
    z = rng.uniform(camera.z_near, camera.z_far, n)
    zn = depth_to_ndc(z, camera.z_near, camera.z_far)
    xn = rng.uniform(-1.0, 1.0, n)
    yn = rng.uniform(-1.0, 1.0, n)
    z = np.clip(ndc_to_depth(zn, camera.z_near, camera.z_far), camera.z_near, camera.z_far)
    # NDC [-1, 1] spans the pixel area [-0.5, W - 0.5]
    u = (xn + 1.0) * 0.5 * camera.width - 0.5
    v = (yn + 1.0) * 0.5 * camera.height - 0.5
    cam = np.stack([(u - camera.cx) / camera.fx * z, (v - camera.cy) / camera.fy * z, z], axis=1)
    return (cam - pose.translation) @ pose.rotation


def nn_log_scales(points: np.ndarray, k: int = 3) -> np.ndarray:
    """Log of the mean distance to the ``k`` nearest other points, per point."""
    if len(points) < 2:
        return np.zeros(len(points))
    k = min(k, len(points) - 1)
    dist, _ = cKDTree(points).query(points, k=k + 1)
    mean = dist[:, 1:].mean(axis=1)
    return np.log(np.maximum(mean, 1e-7))


def frustum_init(track: PoseTrack, camera: CameraModel, n_gaussians: int,
                 rng: np.random.Generator, max_sh_degree: int = 3,
                 max_frusta: int = MAX_FRUSTA) -> GaussianCloud:
    if not len(track):
        raise ContractError("cannot initialize from an empty pose track")
    idx = np.arange(len(track))
    if len(idx) > max_frusta:
        idx = np.unique(np.linspace(0, len(track) - 1, max_frusta).round().astype(np.int64))
    if n_gaussians < len(idx):
        raise ContractError(f"need at least one Gaussian per pose ({len(idx)} poses)")
    per_pose = n_gaussians // len(idx)
    means = np.concatenate([sample_frustum(track.base_pose(i), camera, per_pose, rng) for i in idx])
    n = len(means)
    s = nn_log_scales(means)
    rotations = np.zeros((n, 4))
    rotations[:, 0] = 1.0
    return GaussianCloud(
        means,
        np.repeat(s[:, None], 3, axis=1),
        rotations,
        np.full(n, float(logit(INIT_OPACITY))),
        np.zeros((n, num_basis(max_sh_degree), 3)),
        sh_degree=0,
    )
