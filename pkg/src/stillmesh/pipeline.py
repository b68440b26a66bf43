"""End-to-end correction: stabilizer then rigid fallback, under named presets.

Presets follow an ablation ladder:

=====  ==============================================================
A      raw predictions, untouched
B      outlier rejection only
C      B plus median and adaptive EMA smoothing
D      C plus shape lock and anchor pose lock
E      D plus rigid fit on every frame
F      B plus shape lock, anchor pose lock, rigid fit on failing frames
=====  ==============================================================
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .bodymodel import BodyModel, ShapeParams
from .geometry import CameraIntrinsics
from .metrics import frame_vertices, mesh_mask_iou_series
from .rigidfit import RigidFitConfig, build_pool, run_rigid_fallback
from .records import FrameRecord
from .stabilize import Stabilizer, StabilizerConfig, interpolate_gaps

log = logging.getLogger(__name__)

PRESETS = ("A", "B", "C", "D", "E", "F")

_STAGES = {
    #      stabilizer mode         shape lock  rigid mode
    "A": (None, False, None),
    "B": ("outlier_only", False, None),
    "C": ("outlier_smooth", False, None),
    "D": ("outlier_smooth_lock", True, None),
    "E": ("outlier_smooth_lock", True, "full"),
    "F": ("patient4d", True, "fallback"),
}


class PipelineError(ValueError):
    pass


@dataclass
class Diagnostics:
    preset: str
    keyframe: int | None = None
    raw_iou: list = field(default_factory=list)
    stabilized_iou: list = field(default_factory=list)
    rejections: dict = field(default_factory=dict)
    anchor_resets: int = 0
    fallback_frames: list = field(default_factory=list)
    fits: list = field(default_factory=list)

    def to_dict(self) -> dict:
        def clean(xs):
            return [None if x is None or np.isnan(x) else float(x) for x in xs]
        return {
            "preset": self.preset,
            "keyframe": self.keyframe,
            "raw_iou": clean(self.raw_iou),
            "stabilized_iou": clean(self.stabilized_iou),
            "rejections": self.rejections,
            "anchor_resets": self.anchor_resets,
            "fallback_frames": self.fallback_frames,
            "n_fallback": len(self.fallback_frames),
            "fits": [f.to_dict() for f in self.fits],
        }


def lock_keyframe(frames, ious, config: RigidFitConfig):
    """Best entry of a pool built in one pass over the raw predictions."""
    verts = [None] * len(frames)
    pool = build_pool(frames, verts, ious, config)
    if len(pool) == 0:
        return None
    # first entry wins ties, i.e. the earliest frame
    return max(pool, key=lambda e: e.iou)


def run_pipeline(frames, masks, model: BodyModel, K: CameraIntrinsics, preset: str = "F",
                 stab_config: StabilizerConfig | None = None,
                 fit_config: RigidFitConfig | None = None,
                 batches: list[int] | None = None):
    """Correct a sequence of per-frame predictions.

    ``masks`` aligns with ``frames``; ``None`` marks a missing mask. When
    ``batches`` is given the stabilizer receives the frames in chunks of
    those sizes, exercising its streaming state.
    Returns ``(frames, Diagnostics)``.
    """
    if preset not in PRESETS:
        raise PipelineError(f"unknown preset {preset!r}")
    frames = list(frames)
    if not frames:
        raise PipelineError("empty sequence")
    if len(masks) != len(frames):
        raise PipelineError("frames and masks differ in length")
    stab_config = stab_config or StabilizerConfig()
    fit_config = fit_config or RigidFitConfig()
    mode, shape_lock, rigid_mode = _STAGES[preset]

    diag = Diagnostics(preset)
    scored_masks = [np.zeros((1, 1), bool) if m is None else m for m in masks]
    raw = mesh_mask_iou_series(frames, scored_masks, model, K)
    diag.raw_iou = list(raw)
    if mode is None:
        return frames, diag

    if rigid_mode is not None:
        missing = [f.index for f, m in zip(frames, masks) if f.valid and m is None]
        if missing:
            raise PipelineError(f"missing mask for frame {missing[0]}")

    keyframe_shape = None
    if shape_lock:
        raw_ious = [None if (np.isnan(v) or not f.valid) else float(v) for v, f in zip(raw, frames)]
        entry = lock_keyframe(frames, raw_ious, fit_config)
        if entry is not None:
            diag.keyframe = entry.frame_index
            keyframe_shape = ShapeParams(entry.record.beta, entry.record.scale)

    stab = Stabilizer(stab_config, mode, keyframe_shape)
    out = []
    if batches:
        if sum(batches) != len(frames) or min(batches) <= 0:
            raise PipelineError("batch sizes must be positive and cover the sequence")
        start = 0
        for size in batches:
            out.extend(stab.push(frames[start:start + size]))
            start += size
    else:
        out.extend(stab.push(frames))
    out.extend(stab.flush())
    diag.rejections = {g: int(sum(v)) for g, v in stab.rejections.items()}
    diag.anchor_resets = stab.state.anchor_resets

    if rigid_mode is None:
        return out, diag

    cfg = replace(fit_config, mode=rigid_mode)
    verts = frame_vertices(out, model)
    stab_series = mesh_mask_iou_series(out, scored_masks, model, K, vertices=verts)
    diag.stabilized_iou = list(stab_series)
    ious = [None if np.isnan(v) else float(v) for v in stab_series]
    pool = build_pool(out, verts, ious, cfg)
    fit_masks = [m if (m is not None and m.any()) else None for m in masks]
    corrected, report = run_rigid_fallback(out, fit_masks, model, K, cfg, pool)
    fitted = {i for i, r in enumerate(report) if r.fitted}
    corrected = refill_gaps(corrected, [m is None for m in fit_masks], fitted)
    diag.fits = report
    diag.fallback_frames = [r.frame for r in report if r.fitted]
    return corrected, diag


def refill_gaps(frames, is_gap, replaced):
    """Re-interpolate mask-less frames that border a replaced frame.

    Gap frames were filled by the stabilizer before the rigid fit ran, so a
    gap next to a refitted frame would otherwise keep the discarded values.
    """
    if not replaced:
        return frames
    probe = [FrameRecord.invalid(f.index, f.mask) if g else f for f, g in zip(frames, is_gap)]
    if not any(f.valid for f in probe):
        return frames
    filled = interpolate_gaps(probe)
    out = list(frames)
    n = len(frames)
    i = 0
    while i < n:
        if not is_gap[i]:
            i += 1
            continue
        j = i
        while j < n and is_gap[j]:
            j += 1
        if (i - 1) in replaced or j in replaced:
            out[i:j] = filled[i:j]
        i = j
    return out


def spine_elevation(pelvis, neck, up=(0.0, 1.0, 0.0)) -> float:
    """Angle in radians between the pelvis-to-neck axis and the horizontal plane."""
    v = np.asarray(neck, dtype=float) - np.asarray(pelvis, dtype=float)
    n = np.linalg.norm(v)
    if n < 1e-12:
        raise PipelineError("pelvis and neck coincide")
    u = np.asarray(up, dtype=float)
    u = u / np.linalg.norm(u)
    return float(np.arcsin(min(1.0, abs(v @ u) / n)))


def select_recumbent_subject(candidates, up=(0.0, 1.0, 0.0)) -> int:
    """Index of the candidate whose spine lies closest to horizontal.

    Each candidate is a ``(pelvis, neck)`` pair of 3-vectors in a
    gravity-aligned frame. Ties go to the lowest index.
    """
    if len(candidates) == 0:
        raise PipelineError("no candidate subjects")
    best, best_angle = 0, np.inf
    for i, (pelvis, neck) in enumerate(candidates):
        a = spine_elevation(pelvis, neck, up)
        if a < best_angle:
            best, best_angle = i, a
    return best
