"""Procedural test scene and orbit trajectories for simulation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .events import DEFAULT_CONTRAST, EventStore, simulate_events
from .poserefine import PoseTrack
from .rasterizer import DEFAULT_BACKGROUND, render
from .scene import CameraModel, GaussianCloud, SE3Pose, logit
from .sh import rgb_to_dc


def toy_cloud(n: int = 100, seed: int = 0) -> GaussianCloud:
    """Colorful blob of ``n`` Gaussians within about one unit of the origin."""
    rng = np.random.default_rng(seed)
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    means = d * rng.uniform(0.3, 1.0, (n, 1)) ** (1 / 3) * np.array([1.0, 1.0, 0.8])
    # smooth color field over the surface directions, kept away from black
    rgb = 0.5 + 0.4 * np.stack([np.sin(2.0 * d[:, 0] + 0.5), np.sin(2.0 * d[:, 1] + 2.0),
                                np.sin(2.0 * d[:, 2] + 4.0)], axis=1)
    rgb = np.clip(rgb, 0.05, 1.0) ** 1.5
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return GaussianCloud(
        means,
        np.log(rng.uniform(0.08, 0.2, (n, 3))),
        q,
        logit(rng.uniform(0.6, 0.9, n)),
        rgb_to_dc(rgb)[:, None, :],
        sh_degree=0,
    )


def toy_camera(size: int = 64, fov_deg: float = 45.0, z_near: float = 2.0,
               z_far: float = 6.5) -> CameraModel:
    return CameraModel.from_fov(size, size, fov_deg, z_near=z_near, z_far=z_far)


@dataclass(frozen=True)
class Orbit:
    """Camera circling the z axis while looking at the origin.

    With ``speed_ratio`` > 1 the angular speed varies sinusoidally
    (``cycles`` periods per orbit) between a minimum and ``speed_ratio`` times
    that minimum.  A nonzero ``wobble_deg`` makes the elevation oscillate
    ``wobble_per_turn`` times per revolution, so the camera also moves
    vertically.
    """

    duration_us: int = 10_000_000
    radius: float = 4.0
    elevation_deg: float = 20.0
    speed_ratio: float = 1.0
    cycles: int = 2
    turns: float = 1.0
    phase: float = 0.0
    wobble_deg: float = 0.0
    wobble_per_turn: int = 0

    def angle(self, t) -> np.ndarray:
        s = np.asarray(t, dtype=np.float64) / self.duration_us
        r = (self.speed_ratio - 1.0) / (self.speed_ratio + 1.0)
        k = 2.0 * np.pi * self.cycles
        frac = s - r / k * (np.cos(k * s) - 1.0) if self.cycles else s
        return self.phase + 2.0 * np.pi * self.turns * frac

    def speed(self, t) -> np.ndarray:
        s = np.asarray(t, dtype=np.float64) / self.duration_us
        r = (self.speed_ratio - 1.0) / (self.speed_ratio + 1.0)
        return 1.0 + r * np.sin(2.0 * np.pi * self.cycles * s)

    def pose_at_angle(self, phi: float, elevation_deg: float | None = None) -> SE3Pose:
        el = np.radians(self.elevation_deg if elevation_deg is None else elevation_deg)
        eye = self.radius * np.array([np.cos(el) * np.cos(phi), np.cos(el) * np.sin(phi), np.sin(el)])
        return SE3Pose.look_at(eye, np.zeros(3), up=(0.0, 0.0, 1.0))

    def elevation(self, phi) -> float:
        return self.elevation_deg + self.wobble_deg * np.sin(self.wobble_per_turn * (phi - self.phase))

    def pose(self, t) -> SE3Pose:
        phi = float(self.angle(t))
        return self.pose_at_angle(phi, self.elevation(phi))

    def track(self, rate_hz: float = 50.0) -> PoseTrack:
        step = int(round(1e6 / rate_hz))
        ts = np.arange(0, self.duration_us + 1, step, dtype=np.int64)
        return PoseTrack.from_poses(ts, [self.pose(t) for t in ts])

    def frame_times(self, max_step_deg: float = 0.25, max_dt_us: int = 20_000) -> np.ndarray:
        """Rendering times for simulation: fine enough in angle and in time."""
        fine = np.linspace(0, self.duration_us, 200_001)
        phi = self.angle(fine)
        n_ang = int(np.ceil(abs(phi[-1] - phi[0]) / np.radians(max_step_deg)))
        by_angle = np.interp(np.linspace(phi[0], phi[-1], n_ang + 1), phi, fine)
        by_time = np.arange(0, self.duration_us + 1, max_dt_us)
        ts = np.unique(np.rint(np.concatenate([by_angle, by_time, [self.duration_us]])).astype(np.int64))
        return ts[(ts >= 0) & (ts <= self.duration_us)]


def log_video(cloud: GaussianCloud, camera: CameraModel, poses, times, background=DEFAULT_BACKGROUND):
    for t, pose in zip(times, poses):
        yield int(t), render(cloud, pose, camera, background).log_image


def simulate_orbit(cloud: GaussianCloud, camera: CameraModel, orbit: Orbit,
                   contrast_threshold: float = DEFAULT_CONTRAST,
                   background=DEFAULT_BACKGROUND, max_step_deg: float = 0.25) -> EventStore:
    times = orbit.frame_times(max_step_deg)
    poses = (orbit.pose(t) for t in times)
    return simulate_events(log_video(cloud, camera, poses, times, background), contrast_threshold)


def heldout_poses(orbit: Orbit, n_views: int = 8, elevation_offset_deg: float = 0.0) -> list[SE3Pose]:
    """Views between the training orbit angles (half a view step off the grid)."""
    phis = orbit.phase + 2.0 * np.pi * (np.arange(n_views) + 0.5) / n_views + 0.0137
    return [orbit.pose_at_angle(p, orbit.elevation_deg + elevation_offset_deg) for p in phis]


def random_cloud(n: int, rng: np.random.Generator, sh_degree: int = 1, extent: float = 0.8,
                 log_scale=(-2.2, -1.2), opacity=(0.2, 0.8), sh_std: float = 0.3) -> GaussianCloud:
    """Random scene for gradient and oracle tests."""
    q = rng.normal(size=(n, 4))
    return GaussianCloud(
        rng.uniform(-extent, extent, (n, 3)) * np.array([1.0, 1.0, 0.6]),
        rng.uniform(*log_scale, (n, 3)),
        q,
        logit(rng.uniform(*opacity, n)),
        rng.normal(0.0, sh_std, (n, (sh_degree + 1) ** 2, 3)),
        sh_degree=sh_degree,
    )

