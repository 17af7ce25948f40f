"""Held-out view evaluation: color correction, optional test-pose alignment, PSNR/SSIM."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .losses import color_correct
from .metrics import linear_to_display, psnr, ssim
from .rasterizer import DEFAULT_BACKGROUND, render, render_backward
from .scene import CameraModel, GaussianCloud, SE3Pose


@dataclass
class ViewMetrics:
    psnr: float
    ssim: float


def view_metrics(pred_log: np.ndarray, gt_log: np.ndarray) -> ViewMetrics:
    """Metrics on display values after fitting the prediction to the reference in log space."""
    if pred_log.shape != gt_log.shape:
        raise ContractError(f"image shapes differ: {pred_log.shape} vs {gt_log.shape}")
    corrected = np.exp(color_correct(pred_log, gt_log))
    a = np.clip(linear_to_display(corrected), 0.0, 1.0)
    b = np.clip(linear_to_display(np.exp(gt_log)), 0.0, 1.0)
    return ViewMetrics(psnr(a, b), ssim(a, b))


def align_pose(cloud: GaussianCloud, pose: SE3Pose, camera: CameraModel, gt_log: np.ndarray,
               iters: int = 200, lr: float = 1e-3, background=DEFAULT_BACKGROUND) -> SE3Pose:
    """Refine a test pose against its reference image with the Gaussians frozen.

    Minimizes the squared log-space residual after the per-channel offset fit;
    Adam steps act on the left tangent perturbation of the pose.
    """
    beta1, beta2, eps = 0.9, 0.999, 1e-15
    m = np.zeros(6)
    v = np.zeros(6)
    for k in range(1, iters + 1):
        out = render(cloud, pose, camera, background)
        # the per-channel offset fit leaves a zero-mean residual, so the
        # offset itself contributes no gradient
        resid = color_correct(out.log_image, gt_log) - gt_log
        d_log = 2.0 * resid / gt_log.size
        g = render_backward(cloud, pose, camera, background, d_log, output=out).d_pose
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        step = lr * (m / (1 - beta1 ** k)) / (np.sqrt(v / (1 - beta2 ** k)) + eps)
        pose = pose.perturbed(-step)
    return pose


def evaluate_views(cloud: GaussianCloud, poses, gt_logs, camera: CameraModel, align: bool = False,
                   align_iters: int = 200, align_lr: float = 1e-3,
                   background=DEFAULT_BACKGROUND) -> list[ViewMetrics]:
    if len(poses) != len(gt_logs):
        raise ContractError(f"{len(poses)} poses but {len(gt_logs)} reference images")
    out = []
    for pose, gt in zip(poses, gt_logs):
        if gt.shape != (camera.height, camera.width, 3):
            raise ContractError(f"reference image shape {gt.shape} does not match the camera")
        if align:
            pose = align_pose(cloud, pose, camera, gt, align_iters, align_lr, background)
        out.append(view_metrics(render(cloud, pose, camera, background).log_image, gt))
    return out
