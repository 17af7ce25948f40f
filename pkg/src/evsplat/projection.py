"""Batched Gaussian-to-screen transform and its analytic adjoint.

This is the per-Gaussian part of rendering: world means and factored
covariances go to pixel-space means, inverse 2D covariances ("conics"),
opacities and view-dependent colors.  The per-pixel compositing lives in
:mod:`evsplat.rasterizer`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scene import (
    LOWPASS_FLOOR,
    CameraModel,
    GaussianCloud,
    SE3Pose,
    quat_to_rotmat,
    quat_to_rotmat_backward,
    sigmoid,
    view_ratio_limits,
)
from .sh import num_basis, sh_basis, sh_basis_jacobian


@dataclass
class Projection:
    index: np.ndarray      # cloud indices of Gaussians inside (z_near, z_far]
    xy: np.ndarray         # (M, 2) pixel-space means
    conic: np.ndarray      # (M, 3) inverse covariance entries (a, b, c)
    cov2d: np.ndarray      # (M, 3) covariance entries (a, b, c) incl. floor
    depth: np.ndarray      # (M,) camera-space z
    opacity: np.ndarray    # (M,)
    color: np.ndarray      # (M, 3)
    cache: dict


def project(cloud: GaussianCloud, pose: SE3Pose, camera: CameraModel) -> Projection:
    W, t = pose.rotation, pose.translation
    xc_all = cloud.means @ W.T + t
    z_all = xc_all[:, 2]
    index = np.flatnonzero((z_all > camera.z_near) & (z_all <= camera.z_far))

    means = cloud.means[index]
    xc = xc_all[index]
    q = cloud.rotations[index]
    qnorm = np.linalg.norm(q, axis=1, keepdims=True)
    qn = q / qnorm
    Rq = quat_to_rotmat(qn)
    s = np.exp(cloud.log_scales[index])
    M = Rq * s[:, None, :]
    Sigma = M @ np.swapaxes(M, 1, 2)

    z = xc[:, 2]
    inv_z = 1.0 / z
    lim_x, lim_y = view_ratio_limits(camera)
    ux = xc[:, 0] * inv_z
    uy = xc[:, 1] * inv_z
    ux_ok = np.abs(ux) <= lim_x
    uy_ok = np.abs(uy) <= lim_y
    uxc = np.clip(ux, -lim_x, lim_x)
    uyc = np.clip(uy, -lim_y, lim_y)
    fx, fy = camera.fx, camera.fy
    J = np.zeros((len(index), 2, 3))
    J[:, 0, 0] = fx * inv_z
    J[:, 0, 2] = -fx * uxc * inv_z
    J[:, 1, 1] = fy * inv_z
    J[:, 1, 2] = -fy * uyc * inv_z
    T = J @ W
    C = T @ Sigma @ np.swapaxes(T, 1, 2)
    a = C[:, 0, 0] + LOWPASS_FLOOR
    b = C[:, 0, 1]
    c = C[:, 1, 1] + LOWPASS_FLOOR
    det = a * c - b * b
    conic = np.stack([c / det, -b / det, a / det], axis=1)
    xy = np.stack([fx * ux + camera.cx, fy * uy + camera.cy], axis=1)

    campos = pose.camera_center()
    dirs = means - campos
    r = np.linalg.norm(dirs, axis=1, keepdims=True)
    dirn = dirs / r
    degree = cloud.sh_degree
    nb = num_basis(degree)
    basis = sh_basis(dirn, degree)
    raw = np.einsum("nb,nbc->nc", basis, cloud.sh_coeffs[index, :nb]) + 0.5
    color = np.maximum(raw, 0.0)

    cache = dict(means=means, xc=xc, qn=qn, qnorm=qnorm, Rq=Rq, s=s, M=M, Sigma=Sigma,
                 inv_z=inv_z, ux=ux, uy=uy, ux_ok=ux_ok, uy_ok=uy_ok, uxc=uxc, uyc=uyc,
                 J=J, T=T, dirn=dirn, r=r, basis=basis, raw=raw, nb=nb)
    return Projection(index, xy, conic, np.stack([a, b, c], axis=1), z,
                      sigmoid(cloud.opacity_logits[index]), color, cache)


def project_backward(proj: Projection, cloud: GaussianCloud, pose: SE3Pose,
                     camera: CameraModel, g_xy, g_conic, g_opacity, g_color) -> dict:
    """Chain screen-space gradients back to cloud parameters and the pose.

    Returns full-size gradient arrays for every cloud parameter plus
    ``rotation`` (3x3) and ``translation`` (3,) gradients of the pose.
    """
    n = len(cloud)
    cch = proj.cache
    W, t = pose.rotation, pose.translation
    idx = proj.index
    fx, fy = camera.fx, camera.fy
    out = {
        "means": np.zeros((n, 3)),
        "log_scales": np.zeros((n, 3)),
        "rotations": np.zeros((n, 4)),
        "opacity_logits": np.zeros(n),
        "sh_coeffs": np.zeros_like(cloud.sh_coeffs),
    }
    if len(idx) == 0:
        out["rotation"] = np.zeros((3, 3))
        out["translation"] = np.zeros(3)
        return out

    o = proj.opacity
    out["opacity_logits"][idx] = g_opacity * o * (1.0 - o)

    # color = max(SH . basis + 0.5, 0)
    g_raw = g_color * (cch["raw"] > 0.0)
    nb = cch["nb"]
    g_sh = np.zeros((len(idx),) + cloud.sh_coeffs.shape[1:])
    g_sh[:, :nb] = cch["basis"][:, :, None] * g_raw[:, None, :]
    out["sh_coeffs"][idx] = g_sh
    g_basis = np.einsum("nbc,nc->nb", cloud.sh_coeffs[idx, :nb], g_raw)
    g_dirn = np.einsum("nb,nbk->nk", g_basis, sh_basis_jacobian(cch["dirn"], cloud.sh_degree))
    dirn = cch["dirn"]
    g_dirs = (g_dirn - dirn * np.sum(dirn * g_dirn, axis=1, keepdims=True)) / cch["r"]
    g_means = g_dirs.copy()
    g_campos = -g_dirs.sum(axis=0)
    # campos = -W^T t
    g_W = -np.outer(t, g_campos)
    g_t = -W @ g_campos

    # conic = inverse of [[a, b], [b, c]]
    a, b, c = proj.conic[:, 0], proj.conic[:, 1], proj.conic[:, 2]
    Cm = np.empty((len(idx), 2, 2))
    Cm[:, 0, 0], Cm[:, 0, 1], Cm[:, 1, 0], Cm[:, 1, 1] = a, b, b, c
    Gc = np.empty((len(idx), 2, 2))
    Gc[:, 0, 0] = g_conic[:, 0]
    Gc[:, 0, 1] = Gc[:, 1, 0] = 0.5 * g_conic[:, 1]
    Gc[:, 1, 1] = g_conic[:, 2]
    G_cov = -Cm @ Gc @ Cm

    T, Sigma = cch["T"], cch["Sigma"]
    G_Sigma = np.swapaxes(T, 1, 2) @ G_cov @ T
    G_T = 2.0 * G_cov @ T @ Sigma
    G_J = G_T @ W.T
    g_W += np.einsum("nki,nkj->ij", cch["J"], G_T)

    inv_z = cch["inv_z"]
    # J entries: fx*inv_z, -fx*uxc*inv_z, fy*inv_z, -fy*uyc*inv_z
    g_inv_z = (G_J[:, 0, 0] * fx - G_J[:, 0, 2] * fx * cch["uxc"]
               + G_J[:, 1, 1] * fy - G_J[:, 1, 2] * fy * cch["uyc"])
    g_ux = -G_J[:, 0, 2] * fx * inv_z * cch["ux_ok"] + g_xy[:, 0] * fx
    g_uy = -G_J[:, 1, 2] * fy * inv_z * cch["uy_ok"] + g_xy[:, 1] * fy
    xc = cch["xc"]
    g_xc = np.empty_like(xc)
    g_xc[:, 0] = g_ux * inv_z
    g_xc[:, 1] = g_uy * inv_z
    g_inv_z += g_ux * xc[:, 0] + g_uy * xc[:, 1]
    g_xc[:, 2] = -g_inv_z * inv_z * inv_z

    # xc = W m + t
    g_means += g_xc @ W
    g_W += g_xc.T @ cch["means"]
    g_t += g_xc.sum(axis=0)
    out["means"][idx] = g_means

    # Sigma = M M^T, M = Rq diag(s)
    G_M = 2.0 * G_Sigma @ cch["M"]
    s = cch["s"]
    G_Rq = G_M * s[:, None, :]
    g_s = np.sum(cch["Rq"] * G_M, axis=1)
    out["log_scales"][idx] = g_s * s
    qn = cch["qn"]
    g_qn = quat_to_rotmat_backward(qn, G_Rq)
    out["rotations"][idx] = (g_qn - qn * np.sum(qn * g_qn, axis=1, keepdims=True)) / cch["qnorm"]

    out["rotation"] = g_W
    out["translation"] = g_t
    return out


def pose_tangent_gradient(g_R: np.ndarray, g_t: np.ndarray, pose: SE3Pose) -> np.ndarray:
    """Gradient w.r.t. ``xi`` for the left perturbation ``exp(xi) @ pose`` at ``xi = 0``."""
    A = g_R @ pose.rotation.T + np.outer(g_t, pose.translation)
    return np.array([A[2, 1] - A[1, 2], A[0, 2] - A[2, 0], A[1, 0] - A[0, 1],
                     g_t[0], g_t[1], g_t[2]])
