"""Finite-difference check of the analytic render gradients.

The rendered image is only piecewise smooth: the 3-sigma cutoff, the alpha
thresholds, early termination, the depth order, frustum clamps and the log
floor all switch discretely.  A central difference that straddles such a
switch measures the jump, not the derivative, so every coordinate whose
+h or -h perturbation changes the discrete state of the render is excluded
and counted separately.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._kernels import ALPHA_MAX, ALPHA_MIN, CUTOFF, T_MIN
from .projection import project
from .rasterizer import LOG_FLOOR, render, render_backward
from .scene import CameraModel, GaussianCloud, SE3Pose
from .toy import random_cloud

PARAMS = ("means", "log_scales", "rotations", "opacity_logits", "sh_coeffs")


def discrete_state(cloud: GaussianCloud, pose: SE3Pose, camera: CameraModel) -> tuple:
    """Everything that switches discretely in a render, as a tuple of arrays."""
    proj = project(cloud, pose, camera)
    H, W = camera.height, camera.width
    order = np.lexsort((proj.index, proj.depth))
    ys, xs = np.mgrid[0:H, 0:W]
    px = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)
    d = px[:, None, :] - proj.xy[order][None]
    A, B, C = proj.conic[order].T
    q = A * d[..., 0] ** 2 + 2.0 * B * d[..., 0] * d[..., 1] + C * d[..., 1] ** 2
    inside = q <= CUTOFF
    a_raw = proj.opacity[order] * np.exp(-0.5 * np.minimum(q, 1e3))
    alpha = np.minimum(a_raw, ALPHA_MAX)
    used = inside & (alpha >= ALPHA_MIN)
    # front-to-back early termination, as in the compositor
    T = np.ones(len(px))
    live = np.ones(len(px), dtype=bool)
    stop = np.full(len(px), len(order))
    for j in range(len(order)):
        test = T * (1.0 - alpha[:, j])
        hit = live & used[:, j]
        end = hit & (test < T_MIN)
        stop[end] = j
        live &= ~end
        T = np.where(hit & live, test, T)
    img = render(cloud, pose, camera).linear_image
    cache = proj.cache
    return (proj.index[order], used, a_raw[used] >= ALPHA_MAX, stop,
            cache["ux_ok"], cache["uy_ok"], cache["raw"] > 0.0, img > LOG_FLOOR)


def _same(s1: tuple, s2: tuple) -> bool:
    return all(np.shape(a) == np.shape(b) and np.array_equal(a, b) for a, b in zip(s1, s2))


@dataclass
class GradcheckResult:
    max_rel_error: dict = field(default_factory=dict)   # parameter group -> max relative error
    checked: dict = field(default_factory=dict)
    excluded: dict = field(default_factory=dict)

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    def merge(self, other: "GradcheckResult") -> None:
        for name, v in other.max_rel_error.items():
            self.max_rel_error[name] = max(self.max_rel_error.get(name, 0.0), v)
            self.checked[name] = self.checked.get(name, 0) + other.checked[name]
            self.excluded[name] = self.excluded.get(name, 0) + other.excluded[name]


def relative_errors(fd: np.ndarray, an: np.ndarray) -> np.ndarray:
    """|fd - an| / max(|fd|, |an|, floor); the floor (1e-6 of the group's
    largest derivative) keeps vanishing derivatives from dividing by zero."""
    fd = np.asarray(fd, dtype=np.float64)
    an = np.asarray(an, dtype=np.float64)
    if not fd.size:
        return fd
    floor = 1e-6 * max(np.abs(fd).max(), np.abs(an).max(), 1e-300)
    return np.abs(fd - an) / np.maximum(np.maximum(np.abs(fd), np.abs(an)), floor)


def check_scene(cloud: GaussianCloud, pose: SE3Pose, camera: CameraModel, weights: np.ndarray,
                h: float = 1e-4) -> GradcheckResult:
    """Compare analytic and central-difference gradients of ``sum(weights * log_image)``."""
    def loss(c, p=pose):
        return float(np.sum(render(c, p, camera).log_image * weights))

    out = render(cloud, pose, camera)
    grads = render_backward(cloud, pose, camera, d_log_image=weights, output=out)
    base = discrete_state(cloud, pose, camera)
    res = GradcheckResult()
    for name in PARAMS:
        an = grads.as_dict()[name]
        arr = getattr(cloud, name)
        fds, ans, skipped = [], [], 0
        for i in range(arr.size):
            plus, minus = cloud.copy(), cloud.copy()
            getattr(plus, name).flat[i] += h
            getattr(minus, name).flat[i] -= h
            if not (_same(base, discrete_state(plus, pose, camera))
                    and _same(base, discrete_state(minus, pose, camera))):
                skipped += 1
                continue
            fds.append((loss(plus) - loss(minus)) / (2.0 * h))
            ans.append(an.flat[i])
        rel = relative_errors(fds, ans)
        res.max_rel_error[name] = float(rel.max()) if rel.size else 0.0
        res.checked[name] = len(fds)
        res.excluded[name] = skipped
    fds, ans, skipped = [], [], 0
    for k in range(6):
        xi = np.zeros(6)
        xi[k] = h
        p_plus, p_minus = pose.perturbed(xi), pose.perturbed(-xi)
        if not (_same(base, discrete_state(cloud, p_plus, camera))
                and _same(base, discrete_state(cloud, p_minus, camera))):
            skipped += 1
            continue
        fds.append((loss(cloud, p_plus) - loss(cloud, p_minus)) / (2.0 * h))
        ans.append(grads.d_pose[k])
    rel = relative_errors(fds, ans)
    res.max_rel_error["pose"] = float(rel.max()) if rel.size else 0.0
    res.checked["pose"] = len(fds)
    res.excluded["pose"] = skipped
    return res


def random_scene(rng: np.random.Generator, n_gaussians: int = 12, size: int = 16):
    """A small random cloud seen from a random direction, plus loss weights."""
    cloud = random_cloud(n_gaussians, rng, sh_degree=int(rng.integers(0, 4)))
    camera = CameraModel.from_fov(size, size, 60.0, z_near=0.2, z_far=20.0)
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    up = np.cross(d, rng.normal(size=3))
    pose = SE3Pose.look_at(4.0 * d, rng.normal(0.0, 0.1, 3), up=up)
    weights = rng.normal(size=(size, size, 3))
    return cloud, pose, camera, weights


def run_suite(n_scenes: int = 20, n_gaussians: int = 12, size: int = 16, h: float = 1e-4,
              seed: int = 0) -> GradcheckResult:
    rng = np.random.default_rng(seed)
    total = GradcheckResult()
    for _ in range(n_scenes):
        total.merge(check_scene(*random_scene(rng, n_gaussians, size), h=h))
    return total
