"""Joint optimization of the Gaussian cloud and the pose error transforms."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .errors import ContractError, NumericError
from .events import (
    BayerMask,
    EventStore,
    equivalent_duration,
    sample_dual_windows,
    sample_fixed_windows,
)
from .init import frustum_init
from .losses import (
    LossWeights,
    event_loss_backward,
    event_loss_pixelwise,
    iso_loss,
    iso_loss_grad,
    pose_reg,
    pose_reg_grad,
    recon_loss,
    recon_weights,
    total_loss,
)
from .optim import Adam
from .poserefine import PoseTrack, compose_error_backward, gram_schmidt_backward
from .rasterizer import DEFAULT_BACKGROUND, render, render_backward
from .scene import CameraModel, GaussianCloud, logit, quat_to_rotmat
from .sh import num_basis

log = logging.getLogger(__name__)

CLOUD_PARAMS = ("means", "log_scales", "rotations", "opacity_logits", "sh_dc", "sh_rest")


@dataclass
class TrainConfig:
    total_iters: int = 60_000
    opacity_reset_until: int = 30_000
    opacity_reset_interval: int = 3000
    densify_from: int = 500
    densify_interval: int = 100
    densify_until: int = 50_000
    densify_threshold_start: float = 2e-4
    densify_threshold_end: float = 4e-5
    densify_threshold_decay_iters: int = 40_000
    percent_dense: float = 0.01
    split_scale_divisor: float = 1.6
    min_opacity: float = 0.005
    max_screen_radius: float = 20.0
    max_world_scale: float = 0.1
    max_gaussians: int = 500_000
    n_gaussians: int = 50_000
    n_max: int = 1_000_000
    window_mode: str = "count"
    alpha: float = 0.3
    lambda_1: float = 0.65
    lambda_2: float = 0.65
    lambda_iso_early: float = 10.0
    lambda_iso_late: float = 1.0
    lambda_iso_switch: int = 10_000
    lambda_pose: float = 1.0
    refine_poses: bool = True
    freeze_gaussians: bool = False
    max_sh_degree: int = -1
    sh_increase_interval: int = 1000
    lr_means_init: float = 1.6e-4
    lr_means_final: float = 1.6e-6
    lr_means_max_steps: int = -1
    lr_sh_dc: float = 2.5e-3
    lr_sh_rest: float = 2.5e-3 / 20
    lr_opacity: float = 0.05
    lr_scaling: float = 5e-3
    lr_rotation: float = 1e-3
    lr_pose: float = 1e-4
    seed: int = 0
    background: tuple = tuple(DEFAULT_BACKGROUND)
    extent: float = -1.0
    log_every: int = 100
    checkpoint_every: int = 5000

    def __post_init__(self):
        for name in ("opacity_reset_until", "densify_until"):
            if getattr(self, name) > self.total_iters:
                setattr(self, name, self.total_iters)
        if self.densify_threshold_start <= 0 or self.densify_threshold_end <= 0:
            raise ContractError("densification thresholds must be positive")
        if self.window_mode not in ("count", "time"):
            raise ContractError("window_mode must be 'count' or 'time'")
        self.background = tuple(float(v) for v in self.background)

    @property
    def sh_degree_cap(self) -> int:
        if self.max_sh_degree >= 0:
            return self.max_sh_degree
        return 1 if self.refine_poses else 3

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_1, self.lambda_2, self.lambda_iso_early,
                           self.lambda_iso_late, self.lambda_iso_switch, self.lambda_pose)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def densify_threshold(iteration: int, cfg: TrainConfig) -> float:
    f = min(max(iteration / cfg.densify_threshold_decay_iters, 0.0), 1.0)
    return cfg.densify_threshold_start + f * (cfg.densify_threshold_end - cfg.densify_threshold_start)


def scene_extent(track: PoseTrack) -> float:
    """1.1 times the largest camera distance from the mean camera center."""
    centers = np.array([track.base_pose(i).camera_center() for i in range(len(track))])
    d = np.linalg.norm(centers - centers.mean(axis=0), axis=1).max()
    return 1.1 * d if d > 0 else 1.0


def means_lr(iteration: int, cfg: TrainConfig, extent: float) -> float:
    steps = cfg.lr_means_max_steps if cfg.lr_means_max_steps > 0 else cfg.total_iters
    f = min(max(iteration / steps, 0.0), 1.0)
    return extent * math.exp((1 - f) * math.log(cfg.lr_means_init) + f * math.log(cfg.lr_means_final))


@dataclass
class TrainState:
    cloud: GaussianCloud
    track: PoseTrack
    store: EventStore
    camera: CameraModel
    config: TrainConfig
    rng: np.random.Generator
    extent: float
    adam: Adam
    pose_adam: Adam
    iteration: int = 0
    grad_accum: np.ndarray = None
    grad_count: np.ndarray = None
    max_radii: np.ndarray = None
    losses: list = field(default_factory=list)
    mask: BayerMask = None
    t_max: float = 0.0

    def __post_init__(self):
        n = len(self.cloud)
        if self.grad_accum is None:
            self.grad_accum = np.zeros(n)
            self.grad_count = np.zeros(n, dtype=np.int64)
            self.max_radii = np.zeros(n)
        if self.mask is None:
            self.mask = BayerMask.rggb(self.camera.height, self.camera.width)
        if self.config.window_mode == "time":
            self.t_max = equivalent_duration(self.store, self.config.n_max)
        ts = self.track.timestamps
        # supervision times need the stream to have started
        self.t_candidates = ts[ts > self.store.t_start]
        if not len(self.t_candidates):
            raise ContractError("no track timestamp lies inside the event stream")


def _adam_lrs(cfg: TrainConfig, extent: float) -> dict:
    return {
        "means": means_lr(0, cfg, extent),
        "log_scales": cfg.lr_scaling,
        "rotations": cfg.lr_rotation,
        "opacity_logits": cfg.lr_opacity,
        "sh_dc": cfg.lr_sh_dc,
        "sh_rest": cfg.lr_sh_rest,
    }


def init_state(store: EventStore, track: PoseTrack, camera: CameraModel, cfg: TrainConfig,
               cloud: GaussianCloud | None = None) -> TrainState:
    rng = np.random.default_rng(cfg.seed)
    if cloud is None:
        cloud = frustum_init(track, camera, cfg.n_gaussians, rng, max_sh_degree=cfg.sh_degree_cap)
    else:
        cloud = cloud.copy()
    extent = cfg.extent if cfg.extent > 0 else scene_extent(track)
    return TrainState(cloud=cloud, track=track.copy(), store=store, camera=camera, config=cfg,
                      rng=rng, extent=extent, adam=Adam(_adam_lrs(cfg, extent)),
                      pose_adam=Adam({"r1": cfg.lr_pose, "r2": cfg.lr_pose, "T": cfg.lr_pose}))


def _cloud_arrays(cloud: GaussianCloud) -> dict[str, np.ndarray]:
    """Views of the cloud parameters as optimizer groups."""
    return {
        "means": cloud.means,
        "log_scales": cloud.log_scales,
        "rotations": cloud.rotations,
        "opacity_logits": cloud.opacity_logits,
        "sh_dc": cloud.sh_coeffs[:, :1],
        "sh_rest": cloud.sh_coeffs[:, 1:],
    }


def train_step(state: TrainState) -> dict:
    """Run one iteration; returns the loss terms of that iteration."""
    cfg, rng, store, track, camera = state.config, state.rng, state.store, state.track, state.camera
    state.iteration += 1
    it = state.iteration
    cloud = state.cloud
    state.adam.lrs["means"] = means_lr(it, cfg, state.extent)
    if it % cfg.sh_increase_interval == 0 and cloud.sh_degree < min(cfg.sh_degree_cap, cloud.max_sh_degree):
        cloud.sh_degree += 1

    t = int(state.t_candidates[rng.integers(len(state.t_candidates))])
    if cfg.window_mode == "count":
        win = sample_dual_windows(store, t, cfg.n_max, rng)
    else:
        win = sample_fixed_windows(store, t, state.t_max, rng)
    times = (t, win.large.t_s, win.small.t_s)

    background = np.array(cfg.background)
    views = []
    for tau in times:
        pose, j, base = track.pose_at(tau)
        views.append((pose, j, base, render(cloud, pose, camera, background)))
    frames = [store.accumulate(win.large.t_s, t), store.accumulate(win.small.t_s, t)]
    log_t = views[0][3].log_image
    maps = [event_loss_pixelwise(views[k + 1][3].log_image, log_t, frames[k], state.mask) for k in range(2)]
    recon = [recon_loss(maps[k], frames[k].counts, cfg.alpha) for k in range(2)]
    visible = views[0][3].visible_set
    iso = iso_loss(cloud, visible)
    errors = [track.error_transform(v[1]) for v in views]
    preg = pose_reg(errors)
    weights = cfg.weights
    loss = total_loss(recon[0], recon[1], iso, preg, it, weights)
    if not np.isfinite(loss):
        raise NumericError(
            f"non-finite loss at iteration {it}: t={t}, windows=({win.large.t_s}, {win.small.t_s}), "
            f"recon={recon}, iso={iso}, pose_reg={preg}")

    d_logs = [np.zeros_like(log_t) for _ in range(3)]
    for k, lam in ((0, weights.lambda_1), (1, weights.lambda_2)):
        w = lam * recon_weights(frames[k].counts, cfg.alpha)
        d_ts, d_t = event_loss_backward(views[k + 1][3].log_image, log_t, frames[k], state.mask, w)
        d_logs[0] += d_t
        d_logs[k + 1] += d_ts

    train_cloud = not cfg.freeze_gaussians
    grads = {name: np.zeros_like(a) for name, a in _cloud_arrays(cloud).items()} if train_cloud else None
    pose_grads = {}
    for (pose, j, base, out), d_log in zip(views, d_logs):
        if not d_log.any():
            continue
        gb = render_backward(cloud, pose, camera, background, d_log, output=out)
        vis = out.visible_set
        state.grad_accum[vis] += gb.screen_grad[vis]
        state.grad_count[vis] += 1
        state.max_radii[vis] = np.maximum(state.max_radii[vis], out.radii[vis])
        if train_cloud:
            grads["means"] += gb.d_means
            grads["log_scales"] += gb.d_log_scales
            grads["rotations"] += gb.d_rotations
            grads["opacity_logits"] += gb.d_opacity_logits
            grads["sh_dc"] += gb.d_sh[:, :1]
            grads["sh_rest"] += gb.d_sh[:, 1:]
        if cfg.refine_poses:
            g = compose_error_backward(base, gb.d_pose_rotation, gb.d_pose_translation)
            pose_grads[j] = pose_grads.get(j, 0.0) + g

    if train_cloud:
        grads["log_scales"] += weights.iso(it) * iso_loss_grad(cloud, visible)
        arrays = _cloud_arrays(cloud)
        for name in CLOUD_PARAMS:
            state.adam.step(name, arrays[name], grads[name])
        cloud.normalize_rotations()

    if cfg.refine_poses:
        for v, g in zip(views, pose_reg_grad(errors)):
            pose_grads[v[1]] = pose_grads.get(v[1], 0.0) + weights.lambda_pose * g
        rows = np.array(sorted(pose_grads), dtype=np.int64)
        g_r1 = np.zeros_like(track.r1)
        g_r2 = np.zeros_like(track.r2)
        g_T = np.zeros_like(track.T)
        for j in rows:
            g = pose_grads[j]
            g_r1[j], g_r2[j] = gram_schmidt_backward(track.r1[j], track.r2[j], g[:, :3])
            g_T[j] = g[:, 3]
        state.pose_adam.step("r1", track.r1, g_r1, rows)
        state.pose_adam.step("r2", track.r2, g_r2, rows)
        state.pose_adam.step("T", track.T, g_T, rows)
        reset = track.repair_degenerate(rows)
        for name in ("r1", "r2", "T"):
            state.pose_adam.reset(name, reset)

    if train_cloud:
        if cfg.densify_from < it <= cfg.densify_until and it % cfg.densify_interval == 0:
            densify_and_prune(state)
        if it % cfg.opacity_reset_interval == 0 and it <= cfg.opacity_reset_until:
            opacity_reset(state)

    record = dict(iteration=it, loss=loss, recon_1=recon[0], recon_2=recon[1], iso=iso,
                  pose_reg=preg, n_gaussians=len(state.cloud), t=t,
                  window_counts=(win.large.count, win.small.count))
    state.losses.append(loss)
    return record


def _remap(state: TrainState, keep: np.ndarray, extra: int = 0) -> None:
    """Apply a row selection (after appending ``extra`` rows) to the
    densification statistics."""
    for name in ("grad_accum", "grad_count", "max_radii"):
        a = getattr(state, name)
        a = np.concatenate([a, np.zeros(extra, dtype=a.dtype)])
        setattr(state, name, a[keep])


def densify_and_prune(state: TrainState) -> None:
    cfg, cloud, it = state.config, state.cloud, state.iteration
    n = len(cloud)
    grads = np.where(state.grad_count > 0, state.grad_accum / np.maximum(state.grad_count, 1), 0.0)
    selected = grads >= densify_threshold(it, cfg)
    max_scale = np.exp(cloud.log_scales.max(axis=1)) if n else np.zeros(0)
    big = max_scale > cfg.percent_dense * state.extent
    budget = max(cfg.max_gaussians - n, 0)
    cand = np.flatnonzero(selected)
    if len(cand) > budget:
        # clones and splits both add one Gaussian; keep the strongest
        cand = cand[np.argsort(-grads[cand], kind="stable")[:budget]]
        selected = np.zeros(n, dtype=bool)
        selected[cand] = True
    clone = selected & ~big
    split = selected & big

    parts = [cloud]
    ci = np.flatnonzero(clone)
    if len(ci):
        parts.append(cloud.subset(ci))
    si = np.flatnonzero(split)
    if len(si):
        children = cloud.subset(np.repeat(si, 2))
        s = np.exp(children.log_scales)
        R = quat_to_rotmat(children.rotations / np.linalg.norm(children.rotations, axis=1, keepdims=True))
        offset = np.einsum("nij,nj->ni", R, s * state.rng.normal(size=s.shape))
        children.means = children.means + offset
        children.log_scales = np.log(s / cfg.split_scale_divisor)
        parts.append(children)
    new = parts[0]
    for p in parts[1:]:
        new = new.concatenate(p)
    extra = len(new) - n
    keep = np.ones(len(new), dtype=bool)
    keep[si] = False

    prune = new.opacities < cfg.min_opacity
    if it > cfg.opacity_reset_interval:
        radii = np.concatenate([state.max_radii, np.zeros(extra)])
        prune |= radii > cfg.max_screen_radius
        prune |= np.exp(new.log_scales.max(axis=1)) > cfg.max_world_scale * state.extent
    keep &= ~prune

    state.adam.append_rows(extra)
    state.adam.keep_rows(keep)
    _remap(state, keep, extra)
    state.cloud = new.subset(np.flatnonzero(keep))
    state.grad_accum[:] = 0.0
    state.grad_count[:] = 0
    state.max_radii[:] = 0.0


def opacity_reset(state: TrainState, value: float = 0.01) -> None:
    """Set every opacity to ``value`` and clear its optimizer moments."""
    state.cloud.opacity_logits[:] = float(logit(value))
    state.adam.reset("opacity_logits")


def train(state: TrainState, iterations: int | None = None, metrics_path=None,
          checkpoint_dir=None, callback=None) -> TrainState:
    cfg = state.config
    end = cfg.total_iters if iterations is None else min(state.iteration + iterations, cfg.total_iters)
    mf = open(metrics_path, "a") if metrics_path else None
    try:
        while state.iteration < end:
            rec = train_step(state)
            if callback is not None:
                callback(state, rec)
            if mf and state.iteration % cfg.log_every == 0:
                rec = dict(rec, **pose_error_stats(state.track))
                mf.write(json.dumps(rec) + "\n")
                mf.flush()
            if checkpoint_dir and state.iteration % cfg.checkpoint_every == 0:
                save_state(Path(checkpoint_dir) / f"ckpt_{state.iteration:06d}.evs", state)
    finally:
        if mf:
            mf.close()
    return state


def pose_error_stats(track: PoseTrack) -> dict:
    """Mean and max ||P^e - I||_F over the track."""
    if not len(track):
        return {"pose_err_mean": 0.0, "pose_err_max": 0.0}
    norms = [pose_reg([track.error_transform(i)]) for i in range(len(track))]
    return {"pose_err_mean": float(np.mean(norms)), "pose_err_max": float(np.max(norms))}


def save_state(path, state: TrainState) -> None:
    arrays = ckpt.cloud_arrays(state.cloud)
    tr = state.track
    arrays.update({
        "track.timestamps": tr.timestamps,
        "track.base_rotations": tr.base_rotations,
        "track.base_translations": tr.base_translations,
        "track.r1": tr.r1,
        "track.r2": tr.r2,
        "track.T": tr.T,
        "stats.grad_accum": state.grad_accum,
        "stats.grad_count": state.grad_count,
        "stats.max_radii": state.max_radii,
        "history.loss": np.array(state.losses, dtype=np.float64),
    })
    arrays.update(state.adam.state_arrays("adam"))
    arrays.update(state.pose_adam.state_arrays("pose_adam"))
    meta = {
        "kind": "train_state",
        "iteration": state.iteration,
        "sh_degree": state.cloud.sh_degree,
        "extent": state.extent,
        "rng": state.rng.bit_generator.state,
        "config": state.config.to_dict(),
        "degenerate_resets": tr.degenerate_resets,
        "camera": {"intrinsics": state.camera.intrinsics.tolist(), "width": state.camera.width,
                   "height": state.camera.height, "z_near": state.camera.z_near,
                   "z_far": state.camera.z_far},
    }
    ckpt.save_container(path, arrays, meta)


def load_state(path, store: EventStore, camera: CameraModel | None = None,
               config: TrainConfig | None = None) -> TrainState:
    arrays, meta = ckpt.load_container(path)
    if meta.get("kind") != "train_state":
        raise ContractError(f"{path}: not a training checkpoint")
    if config is None:
        config = TrainConfig(**meta["config"])
    if camera is None:
        c = meta["camera"]
        camera = CameraModel(np.array(c["intrinsics"]), c["width"], c["height"], c["z_near"], c["z_far"])
    track = PoseTrack(arrays["track.timestamps"], arrays["track.base_rotations"],
                      arrays["track.base_translations"], arrays["track.r1"], arrays["track.r2"],
                      arrays["track.T"])
    track.degenerate_resets = int(meta.get("degenerate_resets", 0))
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    adam = Adam(_adam_lrs(config, meta["extent"]))
    adam.load_state_arrays("adam", arrays)
    pose_adam = Adam({"r1": config.lr_pose, "r2": config.lr_pose, "T": config.lr_pose})
    pose_adam.load_state_arrays("pose_adam", arrays)
    state = TrainState(
        cloud=ckpt.cloud_from_arrays(arrays, int(meta["sh_degree"])), track=track, store=store,
        camera=camera, config=config, rng=rng, extent=float(meta["extent"]), adam=adam,
        pose_adam=pose_adam, iteration=int(meta["iteration"]),
        grad_accum=arrays["stats.grad_accum"], grad_count=arrays["stats.grad_count"],
        max_radii=arrays["stats.max_radii"], losses=list(arrays["history.loss"]))
    state.adam.lrs["means"] = means_lr(state.iteration, config, state.extent)
    return state


def new_cloud_like(cloud: GaussianCloud, sh_degree_cap: int) -> GaussianCloud:
    """Pad or trim SH coefficient blocks to the degree cap of a run."""
    nb = num_basis(sh_degree_cap)
    sh = np.zeros((len(cloud), nb, 3))
    k = min(nb, cloud.sh_coeffs.shape[1])
    sh[:, :k] = cloud.sh_coeffs[:, :k]
    return GaussianCloud(cloud.means.copy(), cloud.log_scales.copy(), cloud.rotations.copy(),
                         cloud.opacity_logits.copy(), sh, min(cloud.sh_degree, sh_degree_cap))
