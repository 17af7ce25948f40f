"""Differentiable tile-based splatting of a GaussianCloud.

Forward: per 16x16 tile, Gaussians are visited in camera-depth order (ties by
index) and alpha-composited front to back; the residual transmittance
multiplies the background.  The rendered log image is
``ln(max(linear, LOG_FLOOR))``.

Backward recomputes the per-pixel blending back to front from the stored
final transmittance, writes per-(tile, Gaussian) partials and reduces them in
a fixed order, so results do not depend on the number of worker threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

from . import _kernels
from .errors import ContractError, NumericError
from .projection import Projection, pose_tangent_gradient, project, project_backward
from .scene import CameraModel, GaussianCloud, SE3Pose

TILE = 16
LOG_FLOOR = 1e-5

# Linear value of 159/255 under the 2.2 display gamma.
DEFAULT_BACKGROUND = np.full(3, (159.0 / 255.0) ** 2.2)


def set_threads(n: int) -> None:
    numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))


@dataclass
class TileBins:
    """Per-tile Gaussian lists in compositing order."""

    tiles_x: int
    tiles_y: int
    offsets: np.ndarray    # (tiles_x * tiles_y + 1,)
    local: np.ndarray      # entries as indices into the projection arrays
    gaussians: np.ndarray  # the same entries as cloud indices

    def tile_list(self, tx: int, ty: int) -> np.ndarray:
        t = ty * self.tiles_x + tx
        return self.gaussians[self.offsets[t]:self.offsets[t + 1]]


@dataclass
class RenderOutput:
    linear_image: np.ndarray
    log_image: np.ndarray
    alpha_image: np.ndarray
    visible_set: np.ndarray
    # filled by render_backward: |d loss / d screen mean| in NDC units
    per_gaussian_screen_grad_accum: np.ndarray | None = None
    radii: np.ndarray | None = None
    state: dict = field(default=None, repr=False)


@dataclass
class GradientBundle:
    d_means: np.ndarray
    d_log_scales: np.ndarray
    d_rotations: np.ndarray
    d_opacity_logits: np.ndarray
    d_sh: np.ndarray
    d_pose: np.ndarray           # (omega, v) for the left perturbation exp(xi) @ pose
    d_pose_rotation: np.ndarray  # raw 3x3 gradient of the world-to-camera rotation
    d_pose_translation: np.ndarray
    screen_grad: np.ndarray      # per-Gaussian NDC-space mean gradient norm

    def as_dict(self) -> dict[str, np.ndarray]:
        return {
            "means": self.d_means,
            "log_scales": self.d_log_scales,
            "rotations": self.d_rotations,
            "opacity_logits": self.d_opacity_logits,
            "sh_coeffs": self.d_sh,
        }


def _check_finite(cloud: GaussianCloud) -> None:
    bad = cloud.first_nonfinite()
    if bad is not None:
        raise NumericError(f"Gaussian {bad} has non-finite parameters")


def _bin(proj: Projection, camera: CameraModel) -> TileBins:
    tiles_x = (camera.width + TILE - 1) // TILE
    tiles_y = (camera.height + TILE - 1) // TILE
    order = np.lexsort((proj.index, proj.depth)).astype(np.int64)
    tile_ids, local = _kernels.bin_gaussians(proj.xy, proj.cov2d, proj.conic, order,
                                             camera.width, camera.height, TILE, tiles_x)
    perm = np.argsort(tile_ids, kind="stable")
    local = local[perm]
    counts = np.bincount(tile_ids, minlength=tiles_x * tiles_y)
    offsets = np.zeros(tiles_x * tiles_y + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    return TileBins(tiles_x, tiles_y, offsets, local, proj.index[local])


def cull_and_bin(cloud: GaussianCloud, pose: SE3Pose, camera: CameraModel) -> TileBins:
    """Tile work lists: each Gaussian lands in every tile holding a pixel
    center inside its 3-sigma screen ellipse; Gaussians outside
    (z_near, z_far] are dropped."""
    return _bin(project(cloud, pose, camera), camera)


def render(cloud: GaussianCloud, pose: SE3Pose, camera: CameraModel,
           background=DEFAULT_BACKGROUND) -> RenderOutput:
    _check_finite(cloud)
    background = np.asarray(background, dtype=np.float64).reshape(3)
    proj = project(cloud, pose, camera)
    bins = _bin(proj, camera)
    H, W = camera.height, camera.width
    image = np.empty((H, W, 3))
    t_final = np.empty((H, W))
    n_last = np.empty((H, W), dtype=np.int64)
    contrib = np.zeros(len(bins.local), dtype=np.bool_)
    entries = _kernels.gather_entries(proj.xy, proj.conic, proj.opacity, proj.color,
                                      proj.cov2d, bins.local, W, H)
    _kernels.raster_forward(*entries, bins.offsets, background, W, H, TILE, bins.tiles_x,
                            image, t_final, n_last, contrib)
    visible = np.unique(bins.gaussians[contrib])
    radii = np.zeros(len(cloud))
    a, b, c = proj.cov2d.T
    mid = 0.5 * (a + c)
    radii[proj.index] = 3.0 * np.sqrt(mid + np.sqrt(np.maximum(mid * mid - (a * c - b * b), 0.0)))
    state = dict(proj=proj, bins=bins, entries=entries, t_final=t_final, n_last=n_last,
                 background=background, pose=pose, camera=camera)
    return RenderOutput(image, np.log(np.maximum(image, LOG_FLOOR)), 1.0 - t_final,
                        visible, radii=radii, state=state)


def render_backward(cloud: GaussianCloud, pose: SE3Pose, camera: CameraModel,
                    background=DEFAULT_BACKGROUND, d_log_image=None,
                    output: RenderOutput | None = None) -> GradientBundle:
    """Gradients of ``sum(d_log_image * log_image)`` w.r.t. the cloud and pose.

    ``output`` may carry the forward state from :func:`render` with the same
    inputs; otherwise the forward pass is recomputed.
    """
    H, W = camera.height, camera.width
    d_log_image = np.asarray(d_log_image, dtype=np.float64)
    if d_log_image.shape != (H, W, 3):
        raise ContractError(f"d_log_image must have shape {(H, W, 3)}, got {d_log_image.shape}")
    if output is None or output.state is None:
        output = render(cloud, pose, camera, background)
    st = output.state
    proj, bins = st["proj"], st["bins"]
    linear = output.linear_image
    d_image = np.where(linear > LOG_FLOOR, d_log_image / np.maximum(linear, LOG_FLOOR), 0.0)

    K = len(bins.local)
    e_xy = np.zeros((K, 2))
    e_conic = np.zeros((K, 3))
    e_opacity = np.zeros(K)
    e_color = np.zeros((K, 3))
    if K:
        _kernels.raster_backward(*st["entries"], bins.offsets, st["background"],
                                 W, H, TILE, bins.tiles_x, st["t_final"], st["n_last"], d_image,
                                 e_xy, e_conic, e_opacity, e_color)
    g_xy, g_conic, g_opacity, g_color = _kernels.reduce_entries(
        bins.local, len(proj.index), e_xy, e_conic, e_opacity, e_color)
    grads = project_backward(proj, cloud, pose, camera, g_xy, g_conic, g_opacity, g_color)

    screen = np.zeros(len(cloud))
    screen[proj.index] = np.hypot(g_xy[:, 0] * 0.5 * W, g_xy[:, 1] * 0.5 * H)
    output.per_gaussian_screen_grad_accum = screen
    return GradientBundle(
        d_means=grads["means"],
        d_log_scales=grads["log_scales"],
        d_rotations=grads["rotations"],
        d_opacity_logits=grads["opacity_logits"],
        d_sh=grads["sh_coeffs"],
        d_pose=pose_tangent_gradient(grads["rotation"], grads["translation"], pose),
        d_pose_rotation=grads["rotation"],
        d_pose_translation=grads["translation"],
        screen_grad=screen,
    )
