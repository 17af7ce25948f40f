"""Event streams: storage, interval accumulation, adaptive windows,
simulation from log-intensity video, and OU pose perturbation.

Timestamps are integer microseconds.  An interval ``(t1, t2]`` holds the
events with ``t1 < t <= t2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import ContractError, InvalidParameterError

CHECKPOINT_EVERY = 1 << 16
DEFAULT_CONTRAST = 0.2

EVENT_MAGIC = "evsplat-events"
EVENT_VERSION = 1
EVENT_RECORD = np.dtype([("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "i1")])


@dataclass(frozen=True)
class BayerMask:
    """RGGB mosaic: R at (even row, even col), B at (odd, odd), G elsewhere."""

    channel_index: np.ndarray

    @classmethod
    def rggb(cls, height: int, width: int) -> "BayerMask":
        yy, xx = np.mgrid[0:height, 0:width]
        return cls((yy % 2 + xx % 2).astype(np.int8))

    @property
    def shape(self) -> tuple[int, int]:
        return self.channel_index.shape

    def one_hot(self) -> np.ndarray:
        return np.eye(3)[self.channel_index]

    def select(self, image: np.ndarray) -> np.ndarray:
        """H x W x 3 -> H x W, keeping each pixel's own channel."""
        image = np.asarray(image)
        if image.shape[:2] != self.shape or image.shape[2:] != (3,):
            raise ContractError(f"expected an image of shape {self.shape + (3,)}, got {image.shape}")
        return np.take_along_axis(image, self.channel_index[..., None].astype(np.intp), axis=2)[..., 0]

    def apply(self, image: np.ndarray) -> np.ndarray:
        """Zero every channel except the pixel's own (H x W x 3 -> H x W x 3)."""
        return np.asarray(image) * self.one_hot()


@dataclass(frozen=True)
class EventFrame:
    """Accumulated events over ``(t_start, t_end]``.

    ``polarity_sum`` is the integer signed event count; ``values`` is that
    count times the contrast threshold.
    """

    polarity_sum: np.ndarray
    counts: np.ndarray
    t_start: int
    t_end: int
    contrast_threshold: float

    @property
    def values(self) -> np.ndarray:
        return self.contrast_threshold * self.polarity_sum

    @property
    def event_mask(self) -> np.ndarray:
        return self.counts > 0

    def __add__(self, other: "EventFrame") -> "EventFrame":
        """Join two adjacent intervals ``(a, b] + (b, c] -> (a, c]``."""
        if self.t_end != other.t_start or self.contrast_threshold != other.contrast_threshold:
            raise ContractError("frames must be adjacent and share the contrast threshold")
        return EventFrame(self.polarity_sum + other.polarity_sum, self.counts + other.counts,
                          self.t_start, other.t_end, self.contrast_threshold)


class WindowResult(NamedTuple):
    t_s: int
    count: int
    saturated: bool


class DualWindows(NamedTuple):
    large: WindowResult
    small: WindowResult


class EventStore:
    """Immutable, time-sorted event stream with per-pixel prefix checkpoints."""

    def __init__(self, t, x, y, p, contrast_threshold: float, width: int, height: int,
                 t_start: int | None = None):
        t = np.asarray(t)
        if t.size and (t.dtype.kind == "f" or (t.dtype.kind == "i" and t.min() < 0)):
            raise ContractError("event timestamps must be non-negative integers")
        self.t = t.astype(np.int64)
        self.x = np.asarray(x).astype(np.uint16)
        self.y = np.asarray(y).astype(np.uint16)
        self.p = np.asarray(p).astype(np.int8)
        n = len(self.t)
        if not (len(self.x) == len(self.y) == len(self.p) == n):
            raise ContractError("event arrays differ in length")
        if not contrast_threshold > 0:
            raise InvalidParameterError("contrast threshold must be positive")
        self.contrast_threshold = float(contrast_threshold)
        self.width, self.height = int(width), int(height)
        if n:
            if np.any(np.diff(self.t) < 0):
                raise ContractError("event timestamps must be non-decreasing")
            if self.x.max() >= self.width or self.y.max() >= self.height:
                raise ContractError("event coordinates outside the sensor")
            if not np.all(np.abs(self.p) == 1):
                raise ContractError("polarities must be -1 or +1")
        if t_start is None:
            t_start = int(self.t[0]) - 1 if n else 0
        if n and t_start >= self.t[0]:
            raise ContractError("t_start must precede the first event")
        self.t_start = int(t_start)
        for a in (self.t, self.x, self.y, self.p):
            a.setflags(write=False)
        self._pix = self.y.astype(np.int64) * self.width + self.x
        self._build_index()

    def _build_index(self):
        npix = self.width * self.height
        n_ck = len(self.t) // CHECKPOINT_EVERY
        self._ck_sum = np.zeros((n_ck + 1, npix), dtype=np.int64)
        self._ck_cnt = np.zeros((n_ck + 1, npix), dtype=np.int64)
        for c in range(n_ck):
            sl = slice(c * CHECKPOINT_EVERY, (c + 1) * CHECKPOINT_EVERY)
            pix = self._pix[sl]
            self._ck_sum[c + 1] = self._ck_sum[c] + np.bincount(pix, self.p[sl], npix).astype(np.int64)
            self._ck_cnt[c + 1] = self._ck_cnt[c] + np.bincount(pix, minlength=npix)

    def __len__(self) -> int:
        return len(self.t)

    @property
    def t_end(self) -> int:
        return int(self.t[-1]) if len(self.t) else self.t_start

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    def index_at(self, t) -> int:
        """Number of events with timestamp <= t."""
        return int(np.searchsorted(self.t, math.floor(t), side="right"))

    def count(self, t1, t2) -> int:
        return self.index_at(t2) - self.index_at(t1)

    def _partial(self, lo: int, hi: int):
        npix = self.width * self.height
        pix = self._pix[lo:hi]
        return (np.bincount(pix, self.p[lo:hi], npix).astype(np.int64),
                np.bincount(pix, minlength=npix).astype(np.int64))

    def _prefix(self, i: int):
        c = i // CHECKPOINT_EVERY
        s, n = self._partial(c * CHECKPOINT_EVERY, i)
        return self._ck_sum[c] + s, self._ck_cnt[c] + n

    def accumulate(self, t1, t2) -> EventFrame:
        """Signed event sums over ``(t1, t2]``."""
        if not t1 < t2:
            raise ContractError(f"accumulate needs t1 < t2, got ({t1}, {t2})")
        i1, i2 = self.index_at(t1), self.index_at(t2)
        if i2 - i1 <= CHECKPOINT_EVERY:
            s, n = self._partial(i1, i2)
        else:
            s2, n2 = self._prefix(i2)
            s1, n1 = self._prefix(i1)
            s, n = s2 - s1, n2 - n1
        shape = (self.height, self.width)
        return EventFrame(s.reshape(shape), n.reshape(shape), math.floor(t1), math.floor(t2),
                          self.contrast_threshold)

    def mean_rate(self) -> float:
        """Events per microsecond over the stream span."""
        span = self.t_end - self.t_start
        return len(self) / span if span > 0 else 0.0


def adaptive_window(store: EventStore, t, n_target: int) -> WindowResult:
    """Latest ``t_s < t`` whose window ``(t_s, t]`` holds at least ``n_target`` events.

    The returned count is the smallest achievable one that is ``>= n_target``
    (equal timestamps can only be taken together).  With too few events
    before ``t`` the stream start is returned and ``saturated`` is set.
    """
    if n_target < 1:
        raise InvalidParameterError("n_target must be at least 1")
    i_end = store.index_at(t)
    if i_end < n_target:
        return WindowResult(store.t_start, i_end, True)
    t_s = int(store.t[i_end - n_target]) - 1
    return WindowResult(t_s, i_end - store.index_at(t_s), False)


def dual_window_ranges(n_max: int) -> tuple[tuple[int, int], tuple[int, int]]:
    """Integer target ranges ``[N/10, N]`` and ``[N/300, N/30]``."""
    if n_max < 300:
        raise InvalidParameterError("N_max must be at least 300")
    return ((math.ceil(n_max / 10), n_max),
            (math.ceil(n_max / 300), n_max // 30))


def sample_dual_windows(store: EventStore, t, n_max: int, rng: np.random.Generator) -> DualWindows:
    (a1, b1), (a2, b2) = dual_window_ranges(n_max)
    n1 = int(rng.integers(a1, b1 + 1))
    n2 = int(rng.integers(a2, b2 + 1))
    return DualWindows(adaptive_window(store, t, n1), adaptive_window(store, t, n2))


def sample_fixed_windows(store: EventStore, t, t_max: float, rng: np.random.Generator) -> DualWindows:
    """Duration-based windows over the same relative ranges, for ablations."""
    out = []
    for lo, hi in ((t_max / 10, t_max), (t_max / 300, t_max / 30)):
        t_s = max(math.floor(t - rng.uniform(lo, hi)), store.t_start)
        t_s = min(t_s, math.floor(t) - 1)
        out.append(WindowResult(t_s, store.count(t_s, t), t_s == store.t_start))
    return DualWindows(*out)


def equivalent_duration(store: EventStore, n_max: int) -> float:
    """Window length (us) holding ``n_max`` events at the stream's mean rate."""
    rate = store.mean_rate()
    if rate <= 0:
        raise ContractError("stream has no events")
    return n_max / rate


def simulate_events(log_video, contrast_threshold: float = DEFAULT_CONTRAST,
                    mask: BayerMask | None = None) -> EventStore:
    """Quantize per-pixel log-intensity changes into events.

    ``log_video`` yields ``(timestamp_us, log_image)`` pairs; images are H x W
    (one value per pixel) or H x W x 3 (reduced through ``mask``, RGGB by
    default).  Each pixel keeps a reference level; when the signal has moved
    ``n`` thresholds away from it, ``n`` events fire at the linearly
    interpolated crossing times and the reference moves by ``n`` thresholds.
    """
    if not contrast_threshold > 0:
        raise InvalidParameterError("contrast threshold must be positive")
    delta = float(contrast_threshold)
    frames = iter(log_video)
    try:
        t_prev, cur = next(frames)
    except StopIteration:
        raise ContractError("log_video is empty") from None

    def mono(img):
        img = np.asarray(img, dtype=np.float64)
        if img.ndim == 3:
            m = mask if mask is not None else BayerMask.rggb(*img.shape[:2])
            img = m.select(img)
        return img

    cur = mono(cur)
    H, W = cur.shape
    ref = cur.copy()
    t_prev = int(t_prev)
    t0 = t_prev
    chunks = []
    for t_next, nxt in frames:
        t_next = int(t_next)
        if t_next <= t_prev:
            raise ContractError(f"frame timestamps must increase ({t_prev} -> {t_next})")
        nxt = mono(nxt)
        if nxt.shape != (H, W):
            raise ContractError("frame shape changed")
        diff = nxt - ref
        n = np.floor(np.abs(diff) / delta + 1e-9).astype(np.int64)
        pix = np.flatnonzero(n)
        if len(pix):
            counts = n.ravel()[pix]
            owner = np.repeat(pix, counts)
            # 1..n for every firing pixel
            j = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts) + 1
            sign = np.sign(diff.ravel()[owner])
            level = ref.ravel()[owner] + sign * j * delta
            start = cur.ravel()[owner]
            span = nxt.ravel()[owner] - start
            safe = np.where(span != 0.0, span, 1.0)
            frac = np.where(span != 0.0, (level - start) / safe, 1.0)
            ts = t_prev + np.rint(np.clip(frac, 0.0, 1.0) * (t_next - t_prev)).astype(np.int64)
            ts = np.clip(ts, t_prev + 1, t_next)
            chunks.append((ts, owner, sign.astype(np.int8)))
            ref += np.sign(diff) * n * delta
        t_prev, cur = t_next, nxt

    if chunks:
        ts = np.concatenate([c[0] for c in chunks])
        pix = np.concatenate([c[1] for c in chunks])
        pol = np.concatenate([c[2] for c in chunks])
        order = np.argsort(ts, kind="stable")
        ts, pix, pol = ts[order], pix[order], pol[order]
    else:
        ts = np.zeros(0, np.int64)
        pix = np.zeros(0, np.int64)
        pol = np.zeros(0, np.int8)
    return EventStore(ts, pix % W, pix // W, pol, delta, W, H, t_start=t0)


def ou_process(n_steps: int, dt: float, sigma, theta: float, rng: np.random.Generator,
               x0=None) -> np.ndarray:
    """Euler-Maruyama Ornstein-Uhlenbeck paths, one column per entry of ``sigma``.

    ``x_{k+1} = x_k - theta x_k dt + sigma sqrt(dt) N(0, 1)``.  Without
    ``x0`` the first sample is drawn from the stationary distribution so the
    noise has zero mean from the start.  ``dt`` may be an array of step sizes.
    """
    sigma = np.atleast_1d(np.asarray(sigma, dtype=np.float64))
    if np.any(sigma < 0) or not theta > 0:
        raise InvalidParameterError("need sigma >= 0 and theta > 0")
    dt = np.broadcast_to(np.asarray(dt, dtype=np.float64), (max(n_steps - 1, 0),))
    out = np.zeros((n_steps, len(sigma)))
    if n_steps == 0:
        return out
    if x0 is None:
        out[0] = rng.normal(size=len(sigma)) * sigma / np.sqrt(2.0 * theta)
    else:
        out[0] = x0
    noise = rng.normal(size=(n_steps - 1, len(sigma)))
    for k in range(n_steps - 1):
        out[k + 1] = out[k] - theta * out[k] * dt[k] + sigma * np.sqrt(dt[k]) * noise[k]
    return out


def perturb_poses(track, sigma_rot: float, sigma_trans: float, theta: float,
                  rng: np.random.Generator):
    """Compose time-correlated OU noise onto every base pose of ``track``.

    The camera turns about its own center by the exponential map of the
    three rotation channels (rad) and its center moves additively by the
    three translation channels (world units).  ``sigma`` is per sqrt(second).
    """
    from .poserefine import PoseTrack
    from .scene import so3_exp

    if sigma_rot == 0 and sigma_trans == 0:
        return track.copy()
    dt = np.diff(track.timestamps) * 1e-6
    noise = ou_process(len(track), dt, [sigma_rot] * 3 + [sigma_trans] * 3, theta, rng)
    R = np.stack([so3_exp(w) @ R for w, R in zip(noise[:, :3], track.base_rotations)])
    centers = -np.einsum("nji,nj->ni", track.base_rotations, track.base_translations)
    t = -np.einsum("nij,nj->ni", R, centers + noise[:, 3:])
    return PoseTrack(track.timestamps.copy(), R, t)


def write_event_file(path, store: EventStore) -> None:
    """Text header then packed little-endian ``(t u64, x u16, y u16, p i8)`` records."""
    header = (f"{EVENT_MAGIC} {EVENT_VERSION}\n"
              f"contrast_threshold {store.contrast_threshold!r}\n"
              f"width {store.width}\n"
              f"height {store.height}\n"
              f"count {len(store)}\n"
              f"t_start {store.t_start}\n"
              "end_header\n")
    rec = np.empty(len(store), dtype=EVENT_RECORD)
    rec["t"], rec["x"], rec["y"], rec["p"] = store.t, store.x, store.y, store.p
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(rec.tobytes())


def read_event_file(path) -> EventStore:
    data = Path(path).read_bytes()
    end = data.find(b"end_header\n")
    if end < 0:
        raise ContractError(f"{path}: missing end_header")
    lines = data[:end].decode("ascii").splitlines()
    magic = lines[0].split()
    if magic != [EVENT_MAGIC, str(EVENT_VERSION)]:
        raise ContractError(f"{path}: not a version {EVENT_VERSION} event file")
    meta = dict(line.split(None, 1) for line in lines[1:])
    count = int(meta["count"])
    body = data[end + len(b"end_header\n"):]
    if len(body) != count * EVENT_RECORD.itemsize:
        raise ContractError(f"{path}: expected {count} records, found {len(body)} bytes")
    rec = np.frombuffer(body, dtype=EVENT_RECORD)
    return EventStore(rec["t"], rec["x"], rec["y"], rec["p"], float(meta["contrast_threshold"]),
                      int(meta["width"]), int(meta["height"]), t_start=int(meta["t_start"]))
