"""Refinable camera tracks.

Every track timestamp carries an error transform ``P^e`` encoded as two
3-vectors ``(r1, r2)`` for the rotation (orthonormalized by Gram-Schmidt)
and a translation ``T``.  The refined world-to-camera pose is
``P' = P^e @ P``.
"""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation, Slerp

from .errors import ContractError, InvalidParameterError
from .scene import SE3Pose

log = logging.getLogger(__name__)

IDENTITY_R1 = np.array([1.0, 0.0, 0.0])
IDENTITY_R2 = np.array([0.0, 1.0, 0.0])

# relative size below which r1 or the orthogonal part of r2 counts as degenerate
DEGENERATE_TOL = 1e-9


def gram_schmidt(r1, r2, T, index: int | None = None) -> np.ndarray:
    """3x4 transform ``[r1' r2' r3' | T]`` with orthonormal columns ``r'``."""
    r1 = np.asarray(r1, dtype=np.float64)
    r2 = np.asarray(r2, dtype=np.float64)
    n1 = np.linalg.norm(r1)
    where = "" if index is None else f" at track index {index}"
    if not n1 > 0 or not np.isfinite(n1):
        raise InvalidParameterError(f"zero or non-finite r1{where}")
    b1 = r1 / n1
    u = r2 - (b1 @ r2) * b1
    nu = np.linalg.norm(u)
    if not nu > DEGENERATE_TOL * max(np.linalg.norm(r2), 1e-300):
        raise InvalidParameterError(f"r2 is parallel to r1{where}")
    b2 = u / nu
    out = np.empty((3, 4))
    out[:, 0] = b1
    out[:, 1] = b2
    out[:, 2] = np.cross(b1, b2)
    out[:, 3] = T
    return out


def gram_schmidt_backward(r1, r2, g_R) -> tuple[np.ndarray, np.ndarray]:
    """Gradients w.r.t. ``r1`` and ``r2`` given the gradient of the rotation block."""
    r1 = np.asarray(r1, dtype=np.float64)
    r2 = np.asarray(r2, dtype=np.float64)
    n1 = np.linalg.norm(r1)
    b1 = r1 / n1
    u = r2 - (b1 @ r2) * b1
    nu = np.linalg.norm(u)
    b2 = u / nu
    g1, g2, g3 = g_R[:, 0].copy(), g_R[:, 1].copy(), g_R[:, 2]
    # b3 = b1 x b2
    g1 += np.cross(b2, g3)
    g2 += np.cross(g3, b1)
    g_u = (g2 - b2 * (b2 @ g2)) / nu
    g_r2 = g_u - b1 * (b1 @ g_u)
    g1 += -(b1 @ r2) * g_u - (b1 @ g_u) * r2
    g_r1 = (g1 - b1 * (b1 @ g1)) / n1
    return g_r1, g_r2


def compose_error(error: np.ndarray, base: SE3Pose) -> SE3Pose:
    Re, T = error[:, :3], error[:, 3]
    return SE3Pose(Re @ base.rotation, Re @ base.translation + T)


def compose_error_backward(base: SE3Pose, g_R, g_t) -> np.ndarray:
    """Gradient of the 3x4 error transform from gradients of the refined pose."""
    g = np.empty((3, 4))
    g[:, :3] = g_R @ base.rotation.T + np.outer(g_t, base.translation)
    g[:, 3] = g_t
    return g


class PoseTrack:
    """Timestamped base poses with per-timestamp error parameters."""

    def __init__(self, timestamps, rotations, translations, r1=None, r2=None, T=None):
        self.timestamps = np.asarray(timestamps).astype(np.int64)
        n = len(self.timestamps)
        self.base_rotations = np.asarray(rotations, dtype=np.float64).reshape(n, 3, 3)
        self.base_translations = np.asarray(translations, dtype=np.float64).reshape(n, 3)
        if n and np.any(np.diff(self.timestamps) <= 0):
            raise ContractError("track timestamps must be strictly increasing")
        self.r1 = np.tile(IDENTITY_R1, (n, 1)) if r1 is None else np.asarray(r1, dtype=np.float64).reshape(n, 3)
        self.r2 = np.tile(IDENTITY_R2, (n, 1)) if r2 is None else np.asarray(r2, dtype=np.float64).reshape(n, 3)
        self.T = np.zeros((n, 3)) if T is None else np.asarray(T, dtype=np.float64).reshape(n, 3)
        self.degenerate_resets = 0

    @classmethod
    def from_poses(cls, timestamps, poses) -> "PoseTrack":
        return cls(timestamps, [p.rotation for p in poses], [p.translation for p in poses])

    def __len__(self) -> int:
        return len(self.timestamps)

    def copy(self) -> "PoseTrack":
        out = PoseTrack(self.timestamps.copy(), self.base_rotations.copy(),
                        self.base_translations.copy(), self.r1.copy(), self.r2.copy(), self.T.copy())
        out.degenerate_resets = self.degenerate_resets
        return out

    @property
    def span(self) -> tuple[int, int]:
        return int(self.timestamps[0]), int(self.timestamps[-1])

    def base_pose(self, i: int) -> SE3Pose:
        return SE3Pose(self.base_rotations[i], self.base_translations[i])

    def error_transform(self, i: int) -> np.ndarray:
        return gram_schmidt(self.r1[i], self.r2[i], self.T[i], index=i)

    def refined_pose(self, i: int) -> SE3Pose:
        if self.is_identity(i):
            return self.base_pose(i)
        return compose_error(self.error_transform(i), self.base_pose(i))

    def is_identity(self, i: int) -> bool:
        return (np.array_equal(self.r1[i], IDENTITY_R1) and np.array_equal(self.r2[i], IDENTITY_R2)
                and not self.T[i].any())

    def reset(self, i: int) -> None:
        self.r1[i] = IDENTITY_R1
        self.r2[i] = IDENTITY_R2
        self.T[i] = 0.0

    def _degenerate(self, rows) -> np.ndarray:
        r1, r2, T = self.r1[rows], self.r2[rows], self.T[rows]
        n1 = np.linalg.norm(r1, axis=1)
        b1 = r1 / np.where(n1 > 0, n1, 1.0)[:, None]
        u = r2 - np.sum(b1 * r2, axis=1, keepdims=True) * b1
        bad = ~(n1 > 0) | ~(np.linalg.norm(u, axis=1) > DEGENERATE_TOL * np.linalg.norm(r2, axis=1))
        return bad | ~np.isfinite(r1).all(1) | ~np.isfinite(r2).all(1) | ~np.isfinite(T).all(1)

    def repair_degenerate(self, rows=None) -> np.ndarray:
        """Reset encodings that no longer define a rotation to identity.

        Returns the reset track indices; each one is logged and counted in
        ``degenerate_resets``.
        """
        rows = np.arange(len(self)) if rows is None else np.atleast_1d(np.asarray(rows, dtype=np.int64))
        bad = rows[self._degenerate(rows)]
        for i in bad:
            log.warning("pose encoding at track index %d is degenerate; reset to identity", i)
            self.reset(i)
        self.degenerate_resets += len(bad)
        return bad

    def refined_track(self) -> "PoseTrack":
        """Bake the error transforms into new base poses."""
        poses = [self.refined_pose(i) for i in range(len(self))]
        return PoseTrack.from_poses(self.timestamps.copy(), poses)

    def nearest_index(self, t) -> int:
        i = int(np.searchsorted(self.timestamps, t))
        if i == 0:
            return 0
        if i == len(self):
            return i - 1
        return i if self.timestamps[i] - t < t - self.timestamps[i - 1] else i - 1

    def _check_span(self, t):
        if not len(self) or not self.timestamps[0] <= t <= self.timestamps[-1]:
            raise ContractError(f"time {t} outside the track span")

    def interpolate_pose(self, t) -> SE3Pose:
        """SLERP rotation and LERP translation between bracketing refined poses."""
        self._check_span(t)
        i = int(np.searchsorted(self.timestamps, t, side="right")) - 1
        if self.timestamps[i] == t:
            return self.refined_pose(i)
        a, b = self.refined_pose(i), self.refined_pose(i + 1)
        return _interpolate(a, b, self.timestamps[i], self.timestamps[i + 1], t)

    def interpolate_base(self, t) -> SE3Pose:
        self._check_span(t)
        i = int(np.searchsorted(self.timestamps, t, side="right")) - 1
        if self.timestamps[i] == t:
            return self.base_pose(i)
        return _interpolate(self.base_pose(i), self.base_pose(i + 1),
                            self.timestamps[i], self.timestamps[i + 1], t)

    def pose_at(self, t) -> tuple[SE3Pose, int, SE3Pose]:
        """Render pose at time ``t``: the nearest error transform applied to
        the interpolated base pose.  Returns (pose, error index, base pose)."""
        t = min(max(t, self.timestamps[0]), self.timestamps[-1])
        j = self.nearest_index(t)
        base = self.interpolate_base(t)
        if self.is_identity(j):
            return base, j, base
        return compose_error(self.error_transform(j), base), j, base


def _interpolate(a: SE3Pose, b: SE3Pose, ta, tb, t) -> SE3Pose:
    w = (t - ta) / (tb - ta)
    rots = Rotation.from_matrix(np.stack([a.rotation, b.rotation]))
    R = Slerp([0.0, 1.0], rots)([w]).as_matrix()[0]
    return SE3Pose(R, (1.0 - w) * a.translation + w * b.translation)


def rotation_error(a, b) -> float:
    """Geodesic angle (rad) between two rotation matrices."""
    c = (np.trace(np.asarray(a).T @ np.asarray(b)) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def track_errors(track: PoseTrack, reference: PoseTrack, refined: bool = True):
    """Per-timestamp rotation (rad) and camera-center errors against ``reference``."""
    rot, trans = [], []
    for i in range(len(track)):
        p = track.refined_pose(i) if refined else track.base_pose(i)
        q = reference.base_pose(i)
        rot.append(rotation_error(p.rotation, q.rotation))
        trans.append(np.linalg.norm(p.camera_center() - q.camera_center()))
    return np.array(rot), np.array(trans)


def write_pose_file(path, track: PoseTrack, refined: bool = False) -> None:
    """One line per pose: ``t_us tx ty tz qx qy qz qw`` (world-to-camera)."""
    lines = ["# evsplat pose track: t_us tx ty tz qx qy qz qw (world-to-camera)"]
    if refined:
        lines.append("# refined")
    for i in range(len(track)):
        p = track.refined_pose(i) if refined else track.base_pose(i)
        q = Rotation.from_matrix(p.rotation).as_quat()
        vals = " ".join(f"{v:.17g}" for v in (*p.translation, *q))
        lines.append(f"{track.timestamps[i]} {vals}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_pose_file(path) -> PoseTrack:
    ts, R, t = [], [], []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise ContractError(f"{path}:{n}: expected 8 fields, got {len(parts)}")
        ts.append(int(parts[0]))
        vals = np.array([float(v) for v in parts[1:]])
        if not np.linalg.norm(vals[3:]) > 0:
            raise ContractError(f"{path}:{n}: zero quaternion")
        R.append(Rotation.from_quat(vals[3:]).as_matrix())
        t.append(vals[:3])
    return PoseTrack(np.array(ts, dtype=np.int64), np.array(R).reshape(-1, 3, 3),
                     np.array(t).reshape(-1, 3))
