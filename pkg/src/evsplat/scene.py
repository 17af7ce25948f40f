"""Scene representation: Gaussian clouds, cameras, rigid poses.

Poses are world-to-camera everywhere: ``x_cam = R @ x_world + t``.
Quaternions are stored scalar-first ``(w, x, y, z)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, InvalidParameterError
from .sh import MAX_DEGREE, degree_for_basis, num_basis, sh_basis

# Added to the diagonal of every projected 2x2 covariance (pixels^2).
LOWPASS_FLOOR = 0.3


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices from unit quaternions (..., 4) -> (..., 3, 3)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1.0 - 2.0 * (y * y + z * z)
    R[..., 0, 1] = 2.0 * (x * y - w * z)
    R[..., 0, 2] = 2.0 * (x * z + w * y)
    R[..., 1, 0] = 2.0 * (x * y + w * z)
    R[..., 1, 1] = 1.0 - 2.0 * (x * x + z * z)
    R[..., 1, 2] = 2.0 * (y * z - w * x)
    R[..., 2, 0] = 2.0 * (x * z - w * y)
    R[..., 2, 1] = 2.0 * (y * z + w * x)
    R[..., 2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return R


def quat_to_rotmat_backward(q: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product of :func:`quat_to_rotmat` (g has shape (..., 3, 3))."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    g00, g01, g02 = g[..., 0, 0], g[..., 0, 1], g[..., 0, 2]
    g10, g11, g12 = g[..., 1, 0], g[..., 1, 1], g[..., 1, 2]
    g20, g21, g22 = g[..., 2, 0], g[..., 2, 1], g[..., 2, 2]
    out = np.empty(q.shape)
    out[..., 0] = 2.0 * (-z * g01 + y * g02 + z * g10 - x * g12 - y * g20 + x * g21)
    out[..., 1] = 2.0 * (y * g01 + z * g02 + y * g10 - 2 * x * g11 - w * g12
                         + z * g20 + w * g21 - 2 * x * g22)
    out[..., 2] = 2.0 * (-2 * y * g00 + x * g01 + w * g02 + x * g10 + z * g12
                         - w * g20 + z * g21 - 2 * y * g22)
    out[..., 3] = 2.0 * (-2 * z * g00 - w * g01 + x * g02 + w * g10 - 2 * z * g11
                         + y * g12 + x * g20 + y * g21)
    return out


def rotmat_to_quat(R: np.ndarray) -> np.ndarray:
    from scipy.spatial.transform import Rotation

    xyzw = Rotation.from_matrix(R).as_quat()
    return np.concatenate([xyzw[..., 3:], xyzw[..., :3]], axis=-1)


def skew(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def so3_exp(omega) -> np.ndarray:
    """Rodrigues' formula for a single rotation vector."""
    omega = np.asarray(omega, dtype=np.float64)
    theta = float(np.linalg.norm(omega))
    K = skew(omega)
    if theta < 1e-12:
        return np.eye(3) + K
    return (np.eye(3) + np.sin(theta) / theta * K
            + (1.0 - np.cos(theta)) / theta**2 * (K @ K))


@dataclass(frozen=True)
class SE3Pose:
    """Rigid world-to-camera transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    @classmethod
    def identity(cls) -> "SE3Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, M) -> "SE3Pose":
        M = np.asarray(M, dtype=np.float64)
        return cls(M[:3, :3], M[:3, 3])

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0)) -> "SE3Pose":
        """Camera at ``eye`` looking at ``target``; camera axes x right, y down, z forward."""
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(fwd, np.array([1.0, 0.0, 0.0]))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])
        return cls(R, -R @ eye)

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def compose(self, other: "SE3Pose") -> "SE3Pose":
        """``self @ other`` (apply ``other`` first)."""
        return SE3Pose(self.rotation @ other.rotation,
                       self.rotation @ other.translation + self.translation)

    def inverse(self) -> "SE3Pose":
        Rt = self.rotation.T
        return SE3Pose(Rt, -Rt @ self.translation)

    def camera_center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def transform(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def perturbed(self, xi) -> "SE3Pose":
        """Left-multiply by ``exp(xi)`` with ``xi = (omega, v)``."""
        xi = np.asarray(xi, dtype=np.float64)
        Re = so3_exp(xi[:3])
        return SE3Pose(Re @ self.rotation, Re @ self.translation + xi[3:])

    def check(self, tol: float = 1e-6) -> None:
        R = self.rotation
        if np.abs(R @ R.T - np.eye(3)).max() > tol or abs(np.linalg.det(R) - 1.0) > tol:
            raise InvalidParameterError("pose rotation is not a proper orthonormal matrix")


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera. Pixel (row i, col j) has its center at image coords (x=j, y=i)."""

    intrinsics: np.ndarray
    width: int
    height: int
    z_near: float = 0.2
    z_far: float = 100.0

    def __post_init__(self):
        K = np.asarray(self.intrinsics, dtype=np.float64).reshape(3, 3)
        object.__setattr__(self, "intrinsics", K)
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise InvalidParameterError("focal lengths must be positive")
        if not 0 < self.z_near < self.z_far:
            raise InvalidParameterError("require 0 < z_near < z_far")
        if self.width <= 0 or self.height <= 0:
            raise InvalidParameterError("image size must be positive")

    @classmethod
    def from_fov(cls, width: int, height: int, fov_x_deg: float, **kw) -> "CameraModel":
        f = 0.5 * width / np.tan(np.radians(fov_x_deg) / 2)
        K = [[f, 0, (width - 1) / 2], [0, f, (height - 1) / 2], [0, 0, 1]]
        return cls(np.array(K), width, height, **kw)

    @property
    def fx(self) -> float:
        return float(self.intrinsics[0, 0])

    @property
    def fy(self) -> float:
        return float(self.intrinsics[1, 1])

    @property
    def cx(self) -> float:
        return float(self.intrinsics[0, 2])

    @property
    def cy(self) -> float:
        return float(self.intrinsics[1, 2])

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width


@dataclass
class GaussianCloud:
    """Optimizable scene of N anisotropic Gaussians.

    ``sh_coeffs`` has shape (N, B, 3); ``sh_degree`` is the active degree and
    may be lower than the degree the coefficient block can hold.
    """

    means: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    sh_coeffs: np.ndarray
    sh_degree: int = field(default=-1)

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64).reshape(-1, 3)
        n = len(self.means)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(n, 3)
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(n, 4)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float64).reshape(n)
        sh = np.asarray(self.sh_coeffs, dtype=np.float64)
        if sh.ndim == 2:
            sh = sh[:, None, :]
        if sh.shape[0] != n or sh.shape[2] != 3:
            raise InvalidParameterError(f"sh_coeffs must have shape (N, B, 3), got {sh.shape}")
        self.sh_coeffs = sh
        max_degree = degree_for_basis(self.sh_coeffs.shape[1])
        if self.sh_degree < 0:
            self.sh_degree = max_degree
        if self.sh_degree > max_degree:
            raise InvalidParameterError("active SH degree exceeds coefficient block size")

    @classmethod
    def empty(cls, max_sh_degree: int = 0) -> "GaussianCloud":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0),
                   np.zeros((0, num_basis(max_sh_degree), 3)), sh_degree=max_sh_degree)

    def __len__(self) -> int:
        return len(self.means)

    @property
    def max_sh_degree(self) -> int:
        return degree_for_basis(self.sh_coeffs.shape[1])

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(self.means.copy(), self.log_scales.copy(), self.rotations.copy(),
                             self.opacity_logits.copy(), self.sh_coeffs.copy(), self.sh_degree)

    def subset(self, index) -> "GaussianCloud":
        return GaussianCloud(self.means[index], self.log_scales[index], self.rotations[index],
                             self.opacity_logits[index], self.sh_coeffs[index], self.sh_degree)

    def concatenate(self, other: "GaussianCloud") -> "GaussianCloud":
        return GaussianCloud(
            np.concatenate([self.means, other.means]),
            np.concatenate([self.log_scales, other.log_scales]),
            np.concatenate([self.rotations, other.rotations]),
            np.concatenate([self.opacity_logits, other.opacity_logits]),
            np.concatenate([self.sh_coeffs, other.sh_coeffs]),
            self.sh_degree,
        )

    def params(self) -> dict[str, np.ndarray]:
        return {
            "means": self.means,
            "log_scales": self.log_scales,
            "rotations": self.rotations,
            "opacity_logits": self.opacity_logits,
            "sh_coeffs": self.sh_coeffs,
        }

    def normalize_rotations(self) -> None:
        self.rotations /= np.linalg.norm(self.rotations, axis=1, keepdims=True)

    def first_nonfinite(self) -> int | None:
        bad = ~np.isfinite(self.means).all(1)
        bad |= ~np.isfinite(self.log_scales).all(1)
        bad |= ~np.isfinite(self.rotations).all(1)
        bad |= ~np.isfinite(self.opacity_logits)
        bad |= ~np.isfinite(self.sh_coeffs).all((1, 2))
        idx = np.flatnonzero(bad)
        return int(idx[0]) if len(idx) else None


def covariance_from_params(log_scale, rotation) -> np.ndarray:
    """3D covariance ``R S S^T R^T`` from a log-scale vector and a quaternion."""
    q = np.asarray(rotation, dtype=np.float64)
    norm = np.linalg.norm(q)
    if not norm > 0:
        raise InvalidParameterError("rotation quaternion has zero norm")
    M = quat_to_rotmat(q / norm) * np.exp(np.asarray(log_scale, dtype=np.float64))
    return M @ M.T


def covariances_from_params(log_scales: np.ndarray, rotations: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(rotations, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise InvalidParameterError(f"zero-norm quaternion at index {int(np.flatnonzero(norms == 0)[0])}")
    M = quat_to_rotmat(rotations / norms) * np.exp(log_scales)[..., None, :]
    return M @ np.swapaxes(M, -1, -2)


def projection_jacobian(mean_cam, camera: CameraModel) -> np.ndarray:
    """Jacobian of the perspective map at camera-space points (N, 3) -> (N, 2, 3).

    The x/z and y/z ratios are clamped to 1.3x the image half-extent before
    evaluation, which keeps far off-axis footprints bounded.
    """
    mean_cam = np.asarray(mean_cam, dtype=np.float64)
    z = mean_cam[..., 2]
    inv_z = 1.0 / z
    lim_x, lim_y = view_ratio_limits(camera)
    ux = np.clip(mean_cam[..., 0] * inv_z, -lim_x, lim_x)
    uy = np.clip(mean_cam[..., 1] * inv_z, -lim_y, lim_y)
    J = np.zeros(mean_cam.shape[:-1] + (2, 3))
    J[..., 0, 0] = camera.fx * inv_z
    J[..., 0, 2] = -camera.fx * ux * inv_z
    J[..., 1, 1] = camera.fy * inv_z
    J[..., 1, 2] = -camera.fy * uy * inv_z
    return J


def view_ratio_limits(camera: CameraModel) -> tuple[float, float]:
    half_w = max(camera.cx + 0.5, camera.width - 0.5 - camera.cx)
    half_h = max(camera.cy + 0.5, camera.height - 0.5 - camera.cy)
    return 1.3 * half_w / camera.fx, 1.3 * half_h / camera.fy


def project_covariance(cov, pose: SE3Pose, camera: CameraModel, mean) -> np.ndarray | None:
    """Screen-space 2x2 covariance ``J W cov W^T J^T`` plus the low-pass floor.

    Returns ``None`` (cull) when the mean is not strictly beyond ``z_near``.
    """
    mean_cam = pose.transform(np.asarray(mean, dtype=np.float64))
    if not mean_cam[2] > camera.z_near:
        return None
    T = projection_jacobian(mean_cam, camera) @ pose.rotation
    out = T @ np.asarray(cov, dtype=np.float64) @ T.T
    out[0, 0] += LOWPASS_FLOOR
    out[1, 1] += LOWPASS_FLOOR
    return out


def eval_sh(sh_block, view_dir, degree: int) -> np.ndarray:
    """Linear RGB of one Gaussian seen along ``view_dir``: ``max(sum_k c_k Y_k + 0.5, 0)``."""
    sh_block = np.asarray(sh_block, dtype=np.float64)
    if num_basis(degree) > sh_block.shape[0] or degree > MAX_DEGREE:
        raise InvalidParameterError(f"degree {degree} needs {num_basis(degree)} coefficients")
    d = np.asarray(view_dir, dtype=np.float64)
    n = np.linalg.norm(d)
    d = d / n if n > 0 else np.array([0.0, 0.0, 1.0])
    basis = sh_basis(d[None], degree)[0]
    return np.maximum(basis @ sh_block[: len(basis)] + 0.5, 0.0)
