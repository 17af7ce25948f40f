"""Training objectives and their gradients, plus evaluation color correction.

Gradient helpers return derivatives of the scalar (or per-pixel map) with
respect to the inputs that the trainer back-propagates through.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .events import BayerMask, EventFrame
from .scene import GaussianCloud

RECON_ALPHA = 0.3
LAMBDA_RECON = 0.65
LAMBDA_ISO_EARLY = 10.0
LAMBDA_ISO_LATE = 1.0
LAMBDA_ISO_SWITCH = 10_000
LAMBDA_POSE = 1.0


def _check_event_shapes(log_t1, log_t2, frame: EventFrame, mask: BayerMask):
    shape = frame.polarity_sum.shape
    for name, img in (("log_t1", log_t1), ("log_t2", log_t2)):
        if np.shape(img) != shape + (3,):
            raise ContractError(f"{name} has shape {np.shape(img)}, expected {shape + (3,)}")
    if mask.shape != shape:
        raise ContractError("Bayer mask does not match the event frame")


def event_residual(log_t1, log_t2, frame: EventFrame, mask: BayerMask) -> np.ndarray:
    _check_event_shapes(log_t1, log_t2, frame, mask)
    return mask.select(np.asarray(log_t2) - np.asarray(log_t1)) - frame.values


def event_loss_pixelwise(log_t1, log_t2, frame: EventFrame, mask: BayerMask) -> np.ndarray:
    """|F(L(t2) - L(t1)) - E(t1, t2)| per pixel."""
    return np.abs(event_residual(log_t1, log_t2, frame, mask))


def event_loss_backward(log_t1, log_t2, frame: EventFrame, mask: BayerMask, d_map):
    """Gradients w.r.t. (log_t1, log_t2) given the gradient of the loss map."""
    g = np.sign(event_residual(log_t1, log_t2, frame, mask)) * d_map
    g2 = mask.one_hot() * g[..., None]
    return -g2, g2


def recon_weights(counts, alpha: float = RECON_ALPHA) -> np.ndarray:
    """Per-pixel weights ``w`` with ``recon_loss = sum(w * loss_map)``."""
    has = np.asarray(counts) > 0
    n_ev = int(has.sum())
    n_no = has.size - n_ev
    w = np.zeros(has.shape)
    if n_no:
        w[~has] = alpha / n_no
    if n_ev:
        w[has] = (1.0 - alpha) / n_ev
    return w


def recon_loss(loss_map, counts, alpha: float = RECON_ALPHA) -> float:
    """alpha * mean(no-event pixels) + (1 - alpha) * mean(event pixels);
    an empty set drops its term."""
    if not 0.0 <= alpha <= 1.0:
        raise ContractError("alpha must lie in [0, 1]")
    return float(np.sum(recon_weights(counts, alpha) * np.asarray(loss_map)))


def _visible(visible) -> np.ndarray:
    return np.unique(np.asarray(visible, dtype=np.int64))


def iso_loss(cloud: GaussianCloud, visible) -> float:
    """Mean over visible Gaussians of ||S - mean(S)||_1 on linear scales."""
    idx = _visible(visible)
    if not len(idx):
        return 0.0
    s = np.exp(cloud.log_scales[idx])
    return float(np.abs(s - s.mean(axis=1, keepdims=True)).sum(axis=1).mean())


def iso_loss_grad(cloud: GaussianCloud, visible) -> np.ndarray:
    """Gradient w.r.t. ``cloud.log_scales`` (full size)."""
    out = np.zeros_like(cloud.log_scales)
    idx = _visible(visible)
    if not len(idx):
        return out
    s = np.exp(cloud.log_scales[idx])
    sg = np.sign(s - s.mean(axis=1, keepdims=True))
    out[idx] = (sg - sg.mean(axis=1, keepdims=True)) / len(idx) * s
    return out


def _pose_residual(error) -> np.ndarray:
    e = np.asarray(error, dtype=np.float64)
    d = e[:3, :4].copy()
    d[:, :3] -= np.eye(3)
    return d


def pose_reg(errors) -> float:
    """Sum of Frobenius norms of ``[R_e - I | T]`` over the given transforms."""
    return float(sum(np.linalg.norm(_pose_residual(e)) for e in errors))


def pose_reg_grad(errors) -> list[np.ndarray]:
    """Gradient (3x4) for each transform; zero at the exact identity."""
    out = []
    for e in errors:
        d = _pose_residual(e)
        n = np.linalg.norm(d)
        out.append(d / n if n > 0 else np.zeros((3, 4)))
    return out


def lambda_iso(iteration: int, switch: int = LAMBDA_ISO_SWITCH,
               early: float = LAMBDA_ISO_EARLY, late: float = LAMBDA_ISO_LATE) -> float:
    return early if iteration < switch else late


@dataclass(frozen=True)
class LossWeights:
    lambda_1: float = LAMBDA_RECON
    lambda_2: float = LAMBDA_RECON
    lambda_iso_early: float = LAMBDA_ISO_EARLY
    lambda_iso_late: float = LAMBDA_ISO_LATE
    lambda_iso_switch: int = LAMBDA_ISO_SWITCH
    lambda_pose: float = LAMBDA_POSE

    def iso(self, iteration: int) -> float:
        return lambda_iso(iteration, self.lambda_iso_switch, self.lambda_iso_early, self.lambda_iso_late)


def total_loss(recon_1, recon_2, iso, pose_r, iteration: int,
               weights: LossWeights = LossWeights()) -> float:
    return (weights.lambda_1 * recon_1 + weights.lambda_2 * recon_2
            + weights.iso(iteration) * iso + weights.lambda_pose * pose_r)


def color_correct(predicted_log, reference_log) -> np.ndarray:
    """Shift each channel of ``predicted_log`` so its mean matches the reference."""
    p = np.asarray(predicted_log, dtype=np.float64)
    r = np.asarray(reference_log, dtype=np.float64)
    if p.shape != r.shape:
        raise ContractError(f"shape mismatch {p.shape} vs {r.shape}")
    axes = tuple(range(p.ndim - 1))
    return p + (r.mean(axis=axes) - p.mean(axis=axes))
