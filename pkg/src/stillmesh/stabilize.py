"""Streaming pose stabilization for a subject that does not move.

Per valid frame, in arrival order:

1. outlier rejection per parameter group (body pose, global rotation,
   camera translation) against the last accepted value, with a forced
   blend after ``n_max`` consecutive rejections;
2. optional centred median filter (delayed by half a window) and adaptive
   EMA, whose rate depends on whether the recent body pose is static;
3. optional pose locking: once ``warmup`` accepted poses are buffered their
   element-wise median becomes an anchor that every later EMA step pulls
   towards.

Invalid frames are held back and filled by interpolation as soon as the next
valid output exists. All state lives on :class:`Stabilizer`, so feeding a
sequence in several batches gives the same output as feeding it at once.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from .bodymodel import ShapeParams
from .geometry import aa_nearest, geodesic_distance, so3_geodesic_blend
from .records import FrameRecord

MODES = ("outlier_only", "outlier_smooth", "outlier_smooth_lock", "patient4d")
GROUPS = ("theta", "r", "c")


class StabilizeError(ValueError):
    pass


@dataclass
class StabilizerConfig:
    tau_theta: float = 0.6
    tau_r: float = 0.6
    tau_c: float = 0.2
    median_window: int = 7
    warmup: int = 48
    anchor_pull: float = 0.005
    ema_static: float = 0.01
    ema_dynamic: float = 0.3
    n_max: int = 10
    force_blend: float = 0.5
    motion_reset: float = 0.3
    static_motion: float = 0.5
    geodesic_rotation_outliers: bool = False

    def __post_init__(self):
        for name in ("tau_theta", "tau_r", "tau_c", "motion_reset", "static_motion"):
            if not getattr(self, name) > 0:
                raise StabilizeError(f"{name} must be positive")
        if self.median_window < 1 or self.median_window % 2 == 0:
            raise StabilizeError("median_window must be a positive odd integer")
        if self.warmup < 1 or self.n_max < 1:
            raise StabilizeError("warmup and n_max must be positive")
        for name in ("anchor_pull", "ema_static", "ema_dynamic", "force_blend"):
            if not 0.0 < getattr(self, name) <= 1.0:
                raise StabilizeError(f"{name} must lie in (0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> "StabilizerConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class GroupState:
    last: np.ndarray | None = None
    reject_count: int = 0


def reject_outlier(state: GroupState, prediction, tau: float, n_max: int, blend: float,
                   distance=None):
    """Return ``(accepted, was_rejected)`` and update ``state`` in place."""
    p = np.asarray(prediction, dtype=float)
    if state.last is None:
        state.last = p.copy()
        state.reject_count = 0
        return p.copy(), False
    if p.shape != state.last.shape:
        raise StabilizeError(f"dimension mismatch: {p.shape} vs {state.last.shape}")
    d = float(np.linalg.norm(p - state.last)) if distance is None else distance(p, state.last)
    if d > tau:
        if state.reject_count >= n_max:
            acc = blend * p + (1.0 - blend) * state.last
            state.last = acc
            state.reject_count = 0
            return acc.copy(), False
        state.reject_count += 1
        return state.last.copy(), True
    state.last = p.copy()
    state.reject_count = 0
    return p.copy(), False


def lock_shape(frames, keyframe_shape: ShapeParams):
    """Broadcast one shape and scale to every valid frame."""
    beta = np.asarray(keyframe_shape.beta, dtype=float)
    return [f.with_(beta=beta.copy(), scale=float(keyframe_shape.scale)) if f.valid else f
            for f in frames]


def _half_window(i: int, n: int, h: int) -> int:
    return min(h, i, n - 1 - i)


def median_filter(series, w: int) -> np.ndarray:
    """Per-column sliding median; windows shrink symmetrically at the edges."""
    x = np.asarray(series, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if w < 1 or w % 2 == 0:
        raise StabilizeError("window must be a positive odd integer")
    n, h = len(x), w // 2
    out = np.empty_like(x)
    for i in range(n):
        k = _half_window(i, n, h)
        out[i] = np.median(x[i - k:i + k + 1], axis=0)
    return out


def mean_motion(poses) -> float:
    p = np.asarray(poses, dtype=float)
    if len(p) < 2:
        return 0.0
    return float(np.linalg.norm(np.diff(p, axis=0), axis=1).mean())


def anchor_drift(recent_poses, anchor) -> float:
    """Distance from the median of the recent poses to the anchor."""
    return float(np.linalg.norm(np.median(np.asarray(recent_poses), axis=0) - anchor))


def classify_segment(recent_poses, static_motion: float = 0.02) -> str:
    """``static`` iff the mean consecutive pose change is strictly below the threshold."""
    return "static" if mean_motion(recent_poses) < static_motion else "dynamic"


def compute_anchor(warmup_buffer) -> np.ndarray:
    """Element-wise median; for an even count the lower-middle element."""
    buf = np.asarray(warmup_buffer, dtype=float)
    if len(buf) == 0:
        raise StabilizeError("empty warm-up buffer")
    return np.sort(buf, axis=0)[(len(buf) - 1) // 2].copy()


def pose_lock_step(prev_smoothed, prediction, anchor, alpha: float, alpha_a: float) -> np.ndarray:
    prev = np.asarray(prev_smoothed, dtype=float)
    return alpha * np.asarray(prediction, dtype=float) + (1.0 - alpha) * (
        (1.0 - alpha_a) * prev + alpha_a * np.asarray(anchor, dtype=float))


def _lerp(a, b, w):
    return (1.0 - w) * np.asarray(a, float) + w * np.asarray(b, float)


def interpolate_frames(left: FrameRecord, right: FrameRecord, index: int, mask=None) -> FrameRecord:
    w = (index - left.index) / (right.index - left.index)
    return FrameRecord(index, True, _lerp(left.pose, right.pose, w), _lerp(left.beta, right.beta, w),
                       float(_lerp([left.scale], [right.scale], w)[0]),
                       so3_geodesic_blend(left.rotation, right.rotation, w),
                       _lerp(left.translation, right.translation, w), mask)


def _hold(src: FrameRecord, index: int, mask) -> FrameRecord:
    return src.with_(index=index, mask=mask)


def interpolate_gaps(frames):
    """Fill every run of invalid frames from the bracketing valid frames."""
    frames = list(frames)
    valid = [i for i, f in enumerate(frames) if f.valid]
    if not valid:
        raise StabilizeError("no valid frame in sequence")
    out = list(frames)
    for i, f in enumerate(frames):
        if f.valid:
            continue
        left = max((v for v in valid if v < i), default=None)
        right = min((v for v in valid if v > i), default=None)
        if left is None:
            out[i] = _hold(frames[right], f.index, f.mask)
        elif right is None:
            out[i] = _hold(frames[left], f.index, f.mask)
        else:
            out[i] = interpolate_frames(frames[left], frames[right], f.index, f.mask)
    return out


@dataclass
class StabilizerState:
    config: StabilizerConfig
    groups: dict = field(default_factory=lambda: {g: GroupState() for g in GROUPS})
    warmup_buffer: list = field(default_factory=list)
    anchor: np.ndarray | None = None
    segment_class: str = "static"
    keyframe_shape: ShapeParams | None = None
    # accepted valid frames waiting for the centred median, and their records
    accepted: list = field(default_factory=list)
    pending_records: list = field(default_factory=list)
    n_emitted: int = 0
    smoothed: np.ndarray | None = None   # previous output (theta | r | c)
    held_invalid: list = field(default_factory=list)
    last_output: FrameRecord | None = None
    anchor_resets: int = 0


class Stabilizer:
    """Stateful stabilizer; call :meth:`push` per batch and :meth:`flush` once."""

    def __init__(self, config: StabilizerConfig | None = None, mode: str = "patient4d",
                 keyframe_shape: ShapeParams | None = None):
        if mode not in MODES:
            raise StabilizeError(f"unknown mode {mode!r}; expected one of {MODES}")
        self.mode = mode
        self.state = StabilizerState(config or StabilizerConfig(), keyframe_shape=keyframe_shape)
        self.rejections = {g: [] for g in GROUPS}

    @property
    def config(self) -> StabilizerConfig:
        return self.state.config

    @property
    def smooths(self) -> bool:
        return self.mode in ("outlier_smooth", "outlier_smooth_lock")

    @property
    def locks(self) -> bool:
        return self.mode in ("outlier_smooth_lock", "patient4d")

    def push(self, frames) -> list[FrameRecord]:
        out: list[FrameRecord] = []
        for f in frames:
            if not f.valid:
                self.state.held_invalid.append(f)
                continue
            self._accept(f)
            out.extend(self._emit_ready(final=False))
        return out

    def flush(self) -> list[FrameRecord]:
        st = self.state
        out = self._emit_ready(final=True)
        if st.held_invalid:
            if st.last_output is None:
                raise StabilizeError("no valid frame in sequence")
            out.extend(_hold(st.last_output, f.index, f.mask) for f in st.held_invalid)
            st.held_invalid = []
        return out

    # -- stage 1

    def _accept(self, f: FrameRecord) -> None:
        st, cfg = self.state, self.config
        if self.locks and st.keyframe_shape is None:
            st.keyframe_shape = f.shape
        g = st.groups
        theta, rej = reject_outlier(g["theta"], f.pose, cfg.tau_theta, cfg.n_max, cfg.force_blend)
        self.rejections["theta"].append(rej)
        rot = np.asarray(f.rotation, dtype=float)
        if g["r"].last is not None:
            rot = aa_nearest(rot, g["r"].last)
        dist = (lambda a, b: geodesic_distance(a, b)) if cfg.geodesic_rotation_outliers else None
        r, rej = reject_outlier(g["r"], rot, cfg.tau_r, cfg.n_max, cfg.force_blend, dist)
        self.rejections["r"].append(rej)
        c, rej = reject_outlier(g["c"], f.translation, cfg.tau_c, cfg.n_max, cfg.force_blend)
        self.rejections["c"].append(rej)
        st.accepted.append(np.concatenate([theta, r, c]))
        st.pending_records.append((f, st.held_invalid))
        st.held_invalid = []

    # -- stage 2 and 3

    def _emit_ready(self, final: bool) -> list[FrameRecord]:
        st, cfg = self.state, self.config
        out = []
        h = cfg.median_window // 2 if self.smooths else 0
        while st.pending_records:
            i = st.n_emitted
            n = len(st.accepted)
            if not final and i + h > n - 1:
                break
            if self.smooths:
                k = _half_window(i, n, h)
                vec = np.median(np.asarray(st.accepted[i - k:i + k + 1]), axis=0)
            else:
                vec = st.accepted[i]
            f, gaps = st.pending_records.pop(0)
            rec = self._finish(i, f, vec)
            for g in gaps:
                if st.last_output is None:
                    out.append(_hold(rec, g.index, g.mask))
                else:
                    out.append(interpolate_frames(st.last_output, rec, g.index, g.mask))
            out.append(rec)
            st.last_output = rec
            st.n_emitted += 1
            self._trim()
        return out

    def _trim(self) -> None:
        # keep only what the median window and motion classifier can still touch
        st, cfg = self.state, self.config
        keep = cfg.median_window
        drop = st.n_emitted - keep
        if drop > 0:
            del st.accepted[:drop]
            st.n_emitted -= drop

    def _finish(self, i: int, f: FrameRecord, vec: np.ndarray) -> FrameRecord:
        st, cfg = self.state, self.config
        nj3 = len(f.pose)
        accepted_theta = st.accepted[i][:nj3]
        lo = max(0, i - cfg.median_window + 1)
        recent = [a[:nj3] for a in st.accepted[lo:i + 1]]
        st.segment_class = classify_segment(recent, cfg.static_motion)
        alpha = cfg.ema_static if st.segment_class == "static" else cfg.ema_dynamic

        anchor_before = st.anchor
        if self.locks:
            if st.anchor is not None and anchor_drift(recent, st.anchor) > cfg.motion_reset:
                st.anchor = None
                st.warmup_buffer = []
                st.anchor_resets += 1
            if st.anchor is None:
                st.warmup_buffer.append(accepted_theta.copy())
                if len(st.warmup_buffer) >= cfg.warmup:
                    st.anchor = compute_anchor(st.warmup_buffer)
        anchor = anchor_before if st.anchor is not None else None

        theta, r, c = vec[:nj3], vec[nj3:nj3 + 3], vec[nj3 + 3:]
        prev = st.smoothed
        if prev is None:
            out_theta, out_r, out_c = theta, r, c
        else:
            p_theta, p_r, p_c = prev[:nj3], prev[nj3:nj3 + 3], prev[nj3 + 3:]
            if self.mode == "outlier_only":
                out_theta, out_r, out_c = theta, r, c
            elif self.mode == "outlier_smooth":
                out_theta = alpha * theta + (1.0 - alpha) * p_theta
                out_r = so3_geodesic_blend(p_r, r, alpha)
                out_c = alpha * c + (1.0 - alpha) * p_c
            elif self.mode == "outlier_smooth_lock":
                if anchor is not None:
                    out_theta = pose_lock_step(p_theta, theta, anchor, alpha, cfg.anchor_pull)
                else:
                    out_theta = alpha * theta + (1.0 - alpha) * p_theta
                # global rotation and translation follow the moving camera
                out_r = so3_geodesic_blend(p_r, r, cfg.ema_dynamic)
                out_c = cfg.ema_dynamic * c + (1.0 - cfg.ema_dynamic) * p_c
            else:  # patient4d: no smoothing, pose locking on theta only
                if anchor is not None:
                    out_theta = pose_lock_step(p_theta, theta, anchor, alpha, cfg.anchor_pull)
                else:
                    out_theta = theta
                out_r, out_c = r, c
        st.smoothed = np.concatenate([out_theta, out_r, out_c])

        if self.locks:
            beta, scale = st.keyframe_shape.beta.copy(), float(st.keyframe_shape.scale)
        else:
            beta, scale = np.asarray(f.beta, float).copy(), float(f.scale)
        return FrameRecord(f.index, True, np.array(out_theta, dtype=float), beta, scale,
                           np.array(out_r, dtype=float), np.array(out_c, dtype=float), f.mask)


def run_stabilizer(frames, config: StabilizerConfig | None = None, mode: str = "patient4d",
                   keyframe_shape: ShapeParams | None = None) -> list[FrameRecord]:
    frames = list(frames)
    if not frames:
        raise StabilizeError("empty input")
    stab = Stabilizer(config, mode, keyframe_shape)
    return stab.push(frames) + stab.flush()
