"""Evaluation metrics: mask agreement, temporal stability, cross-view consistency, PA-PVE."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .bodymodel import BodyModel, GlobalPlacement, pose_mesh
from .geometry import CameraIntrinsics, aa_to_matrix, iou, nn_vertex_error, rasterize_silhouette


class MetricsError(ValueError):
    pass


def _has_mask(m) -> bool:
    return m is not None and bool(np.any(m))


def frame_vertices(frames, model: BodyModel) -> list:
    """Posed camera-frame vertices per frame; ``None`` for invalid records."""
    return [pose_mesh(model, f.pose, f.shape, f.placement) if f.valid else None for f in frames]


def _silhouette_iou(V, mask, model, K):
    if np.any(V[:, 2] <= 1e-6):
        return 0.0
    return iou(rasterize_silhouette(V, model.faces, K), mask)


def mesh_mask_iou_series(frames, masks, model: BodyModel, K: CameraIntrinsics,
                         vertices=None) -> np.ndarray:
    """Per-frame silhouette IoU at full resolution.

    Frames with an empty or missing mask are gaps and come back as NaN. A
    valid mask with an invalid record scores 0.
    """
    if len(frames) != len(masks):
        raise MetricsError("frames and masks differ in length")
    out = np.full(len(frames), np.nan)
    for i, (f, m) in enumerate(zip(frames, masks)):
        if not _has_mask(m):
            continue
        if not f.valid:
            out[i] = 0.0
            continue
        V = vertices[i] if vertices is not None else pose_mesh(model, f.pose, f.shape, f.placement)
        out[i] = _silhouette_iou(V, m, model, K)
    return out


def temporal_displacement(vertex_seq) -> float:
    """Mean over consecutive pairs of ``||V_t - V_{t-1}||_F / N_v`` in metres."""
    V = np.asarray(vertex_seq, dtype=float)
    if V.ndim != 3 or V.shape[0] < 2:
        raise MetricsError("need at least two frames of (N_v, 3) vertices")
    d = np.linalg.norm((V[1:] - V[:-1]).reshape(V.shape[0] - 1, -1), axis=1)
    return float(d.mean() / V.shape[1])


def per_frame_displacement(vertex_seq) -> np.ndarray:
    V = np.asarray(vertex_seq, dtype=float)
    out = np.full(V.shape[0], np.nan)
    if V.shape[0] > 1:
        out[1:] = np.linalg.norm((V[1:] - V[:-1]).reshape(V.shape[0] - 1, -1), axis=1) / V.shape[1]
    return out


def pose_consistency(poses) -> float:
    """Mean L2 distance between consecutive pose vectors, radians."""
    P = np.asarray(poses, dtype=float)
    if P.ndim != 2 or P.shape[0] < 2:
        raise MetricsError("need at least two pose vectors")
    return float(np.linalg.norm(P[1:] - P[:-1], axis=1).mean())


def per_frame_pose_delta(poses) -> np.ndarray:
    P = np.asarray(poses, dtype=float)
    out = np.full(P.shape[0], np.nan)
    if P.shape[0] > 1:
        out[1:] = np.linalg.norm(P[1:] - P[:-1], axis=1)
    return out


def reproject(vertices, src: GlobalPlacement, dst: GlobalPlacement) -> np.ndarray:
    """Strip placement ``src`` from camera-frame vertices and apply ``dst``."""
    Rs, Rd = aa_to_matrix(src.rotation), aa_to_matrix(dst.rotation)
    body = (np.asarray(vertices, dtype=float) - src.translation) @ Rs
    return body @ Rd.T + dst.translation


def cross_view_iou_vertices(vertex_seq, placements, masks, faces, K: CameraIntrinsics,
                            lag: int = 20) -> float:
    """Cross-view IoU over explicit meshes; ``None`` marks an invalid frame."""
    T = len(vertex_seq)
    if lag < 0:
        raise MetricsError("lag must be nonnegative")
    if T <= lag:
        raise MetricsError(f"sequence of {T} frames too short for lag {lag}")
    vals = []
    for t in range(T - lag):
        m = masks[t + lag]
        if not _has_mask(m):
            continue
        V, src, dst = vertex_seq[t], placements[t], placements[t + lag]
        if V is None or dst is None:
            vals.append(0.0)
            continue
        W = V if lag == 0 else reproject(V, src, dst)
        vals.append(0.0 if np.any(W[:, 2] <= 1e-6) else iou(rasterize_silhouette(W, faces, K), m))
    if not vals:
        raise MetricsError("no frame pairs with masks")
    return float(np.mean(vals))


def cross_view_iou(frames, masks, model: BodyModel, K: CameraIntrinsics, lag: int = 20,
                   vertices=None) -> float:
    """Mean IoU of frame t's body seen under frame t+lag's placement.

    Sums over source frames ``0 .. T-lag-1``. The body keeps frame t's pose
    and shape while the global placement is swapped for frame t+lag's, so
    lag 0 reduces to the plain IoU mean. Pairs with an empty target mask
    are skipped; an invalid record on either side scores 0.
    """
    if vertices is None:
        vertices = frame_vertices(frames, model)
    placements = [f.placement if f.valid else None for f in frames]
    return cross_view_iou_vertices(vertices, placements, masks, model.faces, K, lag)


def pa_pve(pred_seq, gt_seq) -> float:
    """Procrustes-aligned per-vertex error in millimetres, averaged over frames."""
    if len(pred_seq) != len(gt_seq) or len(pred_seq) == 0:
        raise MetricsError("prediction and ground-truth sequences must be non-empty and aligned")
    return float(np.mean([nn_vertex_error(p, g) for p, g in zip(pred_seq, gt_seq)]) * 1000.0)


@dataclass
class MetricsReport:
    mean_iou: float
    pct_above_0_6: float
    pct_below_0_3: float
    delta_mesh: float
    delta_pose: float
    cv_iou_20: float | None
    pa_pve: float | None = None
    n_frames: int = 0
    n_gap_frames: int = 0
    lag: int = 20
    per_frame_iou: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_frame_iou"] = [None if np.isnan(v) else float(v) for v in self.per_frame_iou]
        return d

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)


def _fill_invalid(frames):
    """Hold the last valid record over invalid ones so stability metrics stay defined."""
    out, last = [], None
    for f in frames:
        if f.valid:
            last = f
        out.append(last)
    first = next((f for f in frames if f.valid), None)
    if first is None:
        raise MetricsError("no valid frames")
    return [first if f is None else f for f in out]


def evaluate(frames, masks, model: BodyModel, K: CameraIntrinsics, lag: int = 20,
             gt_vertices=None) -> tuple[MetricsReport, dict]:
    """All metrics for one corrected sequence plus a per-frame table."""
    series = mesh_mask_iou_series(frames, masks, model, K)
    scored = series[~np.isnan(series)]
    if scored.size == 0:
        raise MetricsError("no frames with masks to score")
    held = _fill_invalid(frames)
    verts = np.array(frame_vertices(held, model))
    poses = np.array([f.pose for f in held])
    cv = cross_view_iou(frames, masks, model, K, lag) if len(frames) > lag else None
    pve = None
    if gt_vertices is not None:
        pve = pa_pve(verts, gt_vertices)
    report = MetricsReport(
        mean_iou=float(scored.mean()),
        pct_above_0_6=float(100.0 * np.mean(scored >= 0.6)),
        pct_below_0_3=float(100.0 * np.mean(scored < 0.3)),
        delta_mesh=temporal_displacement(verts) if len(frames) > 1 else 0.0,
        delta_pose=pose_consistency(poses) if len(frames) > 1 else 0.0,
        cv_iou_20=cv,
        pa_pve=pve,
        n_frames=len(frames),
        n_gap_frames=int(np.isnan(series).sum()),
        lag=lag,
        per_frame_iou=list(series),
    )
    table = {
        "frame": [f.index for f in frames],
        "iou": series,
        "delta_mesh": per_frame_displacement(verts),
        "delta_pose": per_frame_pose_delta(poses),
    }
    return report, table


def write_per_frame_csv(path, table: dict) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "iou", "delta_mesh", "delta_pose"])
        for row in zip(table["frame"], table["iou"], table["delta_mesh"], table["delta_pose"]):
            w.writerow([row[0]] + ["" if np.isnan(v) else repr(float(v)) for v in row[1:]])
