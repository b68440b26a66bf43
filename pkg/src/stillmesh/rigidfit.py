"""Rigid fallback: re-place a good reference mesh on frames whose prediction failed.

A keyframe pool collects frames whose silhouette agrees with the mask. For a
failing frame the best reference (quality discounted by temporal distance) is
rigidly rotated about its centroid and translated so its silhouette matches
the frame's mask. The search is derivative-free because the objective is a
Dice score over binary rasters.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields
from typing import Callable, NamedTuple

import numpy as np

from .bodymodel import BodyModel, pose_mesh
from .geometry import (
    CameraIntrinsics,
    aa_nearest,
    aa_to_matrix,
    dice,
    downsample_mask,
    geodesic_distance,
    iou,
    matrix_to_aa,
    rasterize_silhouette,
)
from .records import FrameRecord

log = logging.getLogger(__name__)


class RigidFitError(ValueError):
    pass


@dataclass
class RigidFitConfig:
    tau_iou: float = 0.6
    tau_q: float = 0.6
    tau_d: float = 50.0
    lambda_temp: float = 0.1
    lambda_z: float = 1.0
    max_iter: int = 150
    downscale: int = 2
    tau_g: int = 25
    traj_window: int = 5
    mode: str = "fallback"
    rot_step: float = 0.1
    trans_step: float = 0.05
    nm_tol: float = 1e-5
    restart_scales: tuple = (1.0, 2.0, 0.5, 0.25)
    # trajectory smoothing never averages across a jump larger than these
    traj_break_translation: float = 0.1
    traj_break_rotation: float = 0.2

    def __post_init__(self):
        if self.mode not in ("full", "fallback"):
            raise RigidFitError("mode must be 'full' or 'fallback'")
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name in ("mode", "lambda_temp", "lambda_z", "nm_tol", "restart_scales"):
                continue
            if not v > 0:
                raise RigidFitError(f"{f.name} must be positive")
        if self.lambda_temp < 0 or self.lambda_z < 0:
            raise RigidFitError("regularization weights must be nonnegative")
        self.restart_scales = tuple(float(v) for v in self.restart_scales)
        if not self.restart_scales or min(self.restart_scales) <= 0:
            raise RigidFitError("restart_scales must be a non-empty list of positive factors")

    @classmethod
    def from_dict(cls, d: dict) -> "RigidFitConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class RigidParams:
    omega: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.omega = np.asarray(self.omega, dtype=float).reshape(3)
        self.translation = np.asarray(self.translation, dtype=float).reshape(3)

    @classmethod
    def identity(cls) -> "RigidParams":
        return cls(np.zeros(3), np.zeros(3))

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.omega, self.translation])

    @classmethod
    def from_vector(cls, x) -> "RigidParams":
        return cls(x[:3], x[3:])


@dataclass
class KeyframeEntry:
    frame_index: int
    iou: float
    record: FrameRecord
    posed_vertices: np.ndarray

    @property
    def centroid(self) -> np.ndarray:
        return self.posed_vertices.mean(axis=0)


@dataclass
class KeyframePool:
    entries: list = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)


def pool_admit(pool: KeyframePool, frame: FrameRecord, iou_value: float,
               config: RigidFitConfig, posed_vertices: np.ndarray) -> bool:
    """Append ``frame`` if its IoU beats ``tau_q``; the first frame always enters."""
    if not frame.valid:
        return False
    if len(pool) == 0 or iou_value > config.tau_q:
        pool.entries.append(KeyframeEntry(frame.index, float(iou_value), frame,
                                          np.asarray(posed_vertices, dtype=float)))
        return True
    return False


def reference_score(entry: KeyframeEntry, t: int, tau_d: float) -> float:
    return entry.iou * np.exp(-abs(entry.frame_index - t) / tau_d)


def select_reference(pool: KeyframePool, t: int, config: RigidFitConfig,
                     direction: str = "forward") -> KeyframeEntry:
    """Highest ``IoU_k * exp(-|k - t| / tau_d)`` among entries before (or after) ``t``."""
    if direction == "forward":
        eligible = [e for e in pool if e.frame_index < t]
    elif direction == "backward":
        eligible = [e for e in pool if e.frame_index > t]
    else:
        raise RigidFitError(f"unknown direction {direction!r}")
    if not eligible:
        raise RigidFitError(f"no eligible reference for frame {t}")
    best, best_score = None, -np.inf
    for e in eligible:
        s = reference_score(e, t, config.tau_d)
        if best is None or s > best_score * (1 + 1e-12) + 1e-300:
            best, best_score = e, s
        elif abs(s - best_score) <= 1e-12 * max(abs(s), abs(best_score)):
            key = (abs(e.frame_index - t), e.frame_index)
            if key < (abs(best.frame_index - t), best.frame_index):
                best, best_score = e, max(s, best_score)
    return best


# ---------------------------------------------------------------------------
# rigid transform of a reference

def transform_reference(vertices: np.ndarray, centroid: np.ndarray, params: RigidParams) -> np.ndarray:
    """Rotate about ``centroid`` by ``omega`` then translate by ``translation``."""
    R = aa_to_matrix(params.omega)
    return (vertices - centroid) @ R.T + centroid + params.translation


def absolute_placement(entry: KeyframeEntry, params: RigidParams):
    """Global rotation and translation of the reference body after ``params``."""
    R = aa_to_matrix(params.omega)
    Rk = aa_to_matrix(entry.record.rotation)
    cen = entry.centroid
    return R @ Rk, R @ (entry.record.translation - cen) + cen + params.translation


def relative_params(entry: KeyframeEntry, rotation, translation) -> RigidParams:
    """Express an absolute body placement as a rigid change of ``entry``."""
    R = aa_to_matrix(rotation) @ aa_to_matrix(entry.record.rotation).T
    cen = entry.centroid
    omega = matrix_to_aa(R)
    return RigidParams(omega, np.asarray(translation) - cen - R @ (entry.record.translation - cen))


def rigid_objective(params: RigidParams, reference: KeyframeEntry, target_mask: np.ndarray,
                    neighbor: RigidParams | None, K: CameraIntrinsics,
                    config: RigidFitConfig, faces: np.ndarray, downscale: int | None = None) -> float:
    """Negative Dice plus temporal and depth penalties.

    ``target_mask`` must already be at the working resolution. Depth is
    measured relative to the reference, whose own translation change is 0.
    """
    ds = config.downscale if downscale is None else downscale
    V = transform_reference(reference.posed_vertices, reference.centroid, params)
    if np.any(V[:, 2] <= 1e-6):
        return 1.0
    M = rasterize_silhouette(V, faces, K, ds)
    value = -dice(M, target_mask)
    if neighbor is not None:
        value += config.lambda_temp * (np.linalg.norm(params.omega - neighbor.omega) +
                                       np.linalg.norm(params.translation - neighbor.translation))
    value += config.lambda_z * params.translation[2] ** 2
    return float(value)


# ---------------------------------------------------------------------------
# Nelder-Mead

class SimplexResult(NamedTuple):
    x: np.ndarray
    fun: float
    nit: int
    nfev: int


def nelder_mead(f: Callable[[np.ndarray], float], x0, max_iter: int = 200, tol: float = 1e-9,
                step=0.1) -> SimplexResult:
    """Downhill simplex with reflection 1, expansion 2, contraction 0.5, shrink 0.5.

    The initial simplex is ``x0`` plus one vertex per axis offset by ``step``.
    Stops after ``max_iter`` iterations or when the spread of function values
    across the simplex drops below ``tol``.
    """
    x0 = np.asarray(x0, dtype=float)
    n = len(x0)
    steps = np.broadcast_to(np.asarray(step, dtype=float), (n,))
    simplex = np.vstack([x0] + [x0 + steps[i] * np.eye(n)[i] for i in range(n)])
    fvals = np.array([f(x) for x in simplex], dtype=float)
    nfev = n + 1
    if not np.all(np.isfinite(fvals)):
        raise RigidFitError("non-finite objective on the initial simplex")

    nit = 0
    while nit < max_iter:
        order = np.argsort(fvals, kind="stable")
        simplex, fvals = simplex[order], fvals[order]
        if fvals[-1] - fvals[0] < tol:
            break
        nit += 1
        centroid = simplex[:-1].mean(axis=0)
        worst = simplex[-1]
        xr = centroid + (centroid - worst)
        fr = f(xr)
        nfev += 1
        if fr < fvals[0]:
            xe = centroid + 2.0 * (xr - centroid)
            fe = f(xe)
            nfev += 1
            if fe < fr:
                simplex[-1], fvals[-1] = xe, fe
            else:
                simplex[-1], fvals[-1] = xr, fr
            continue
        if fr < fvals[-2]:
            simplex[-1], fvals[-1] = xr, fr
            continue
        if fr < fvals[-1]:
            xc = centroid + 0.5 * (xr - centroid)
            fc = f(xc)
            nfev += 1
            if fc <= fr:
                simplex[-1], fvals[-1] = xc, fc
                continue
        else:
            xc = centroid + 0.5 * (worst - centroid)
            fc = f(xc)
            nfev += 1
            if fc < fvals[-1]:
                simplex[-1], fvals[-1] = xc, fc
                continue
        best = simplex[0]
        for i in range(1, n + 1):
            simplex[i] = best + 0.5 * (simplex[i] - best)
            fvals[i] = f(simplex[i])
        nfev += n
    order = np.argsort(fvals, kind="stable")
    return SimplexResult(simplex[order[0]].copy(), float(fvals[order[0]]), nit, nfev)


# ---------------------------------------------------------------------------
# fitting

def _pixel_centroid(mask):
    rows, cols = np.nonzero(mask)
    return np.array([cols.mean() + 0.5, rows.mean() + 0.5])


def centroid_alignment(reference: KeyframeEntry, small_mask: np.ndarray, start: RigidParams,
                       K: CameraIntrinsics, downscale: int, faces: np.ndarray,
                       rounds: int = 3) -> RigidParams:
    """Slide the reference parallel to the image plane so silhouette centroids meet.

    Repeated a few times because the frame border clips the silhouette.
    """
    Ks = K.scaled(downscale)
    target = _pixel_centroid(small_mask)
    t = start.translation.copy()
    for _ in range(rounds):
        p = RigidParams(start.omega, t)
        V = transform_reference(reference.posed_vertices, reference.centroid, p)
        if np.any(V[:, 2] <= 1e-6):
            break
        M = rasterize_silhouette(V, faces, K, downscale)
        if M.any():
            here = _pixel_centroid(M)
        else:
            here = np.array([Ks.fx * V[:, 0].mean() / V[:, 2].mean() + Ks.cx,
                             Ks.fy * V[:, 1].mean() / V[:, 2].mean() + Ks.cy])
        du, dv = target - here
        z = V[:, 2].mean()
        t = t + np.array([du * z / Ks.fx, dv * z / Ks.fy, 0.0])
        if abs(du) < 0.5 and abs(dv) < 0.5:
            break
    return RigidParams(start.omega, t)


@dataclass
class FitResult:
    params: RigidParams
    iou_after: float
    iterations: int
    objective: float


def fit_frame(reference: KeyframeEntry, target_mask: np.ndarray, init: RigidParams | None,
              neighbor: RigidParams | None, K: CameraIntrinsics, config: RigidFitConfig,
              faces: np.ndarray) -> FitResult:
    """6-DoF simplex search over rotation-about-centroid and translation."""
    init = RigidParams.identity() if init is None else init
    target_mask = np.asarray(target_mask, dtype=bool)
    if not target_mask.any():
        V = transform_reference(reference.posed_vertices, reference.centroid, init)
        return FitResult(init, iou(rasterize_silhouette(V, faces, K), target_mask), 0, np.nan)
    small = downsample_mask(target_mask, config.downscale)

    def objective(x):
        return rigid_objective(RigidParams.from_vector(x), reference, small, neighbor, K,
                               config, faces)

    # The Dice surface is piecewise constant, so a single simplex run can stall
    # on a plateau. Re-seed from the best point with simplices of other sizes;
    # each run contains its start, so the result never gets worse.
    step = np.array([config.rot_step] * 3 + [config.trans_step] * 3)
    x, best, nit = init.vector, objective(init.vector), 0
    moved = centroid_alignment(reference, small, init, K, config.downscale, faces).vector
    f_moved = objective(moved)
    if f_moved < best:
        x, best = moved, f_moved
    for scale in config.restart_scales:
        res = nelder_mead(objective, x, config.max_iter, config.nm_tol, step * scale)
        nit += res.nit
        if res.fun < best:
            x, best = res.x, res.fun
    params = RigidParams.from_vector(x)
    V = transform_reference(reference.posed_vertices, reference.centroid, params)
    return FitResult(params, iou(rasterize_silhouette(V, faces, K), target_mask), nit, best)


@dataclass
class FrameFit:
    frame: int
    pre_iou: float
    post_iou: float | None = None
    reference: int | None = None
    iterations: int = 0
    fitted: bool = False

    def to_dict(self) -> dict:
        return {"frame": self.frame, "pre_iou": self.pre_iou, "post_iou": self.post_iou,
                "reference": self.reference, "iterations": self.iterations,
                "fitted": self.fitted}


def frame_iou(model: BodyModel, rec: FrameRecord, mask: np.ndarray, K: CameraIntrinsics):
    V = pose_mesh(model, rec.pose, rec.shape, rec.placement)
    if np.any(V[:, 2] <= 1e-6):
        return V, 0.0
    return V, iou(rasterize_silhouette(V, model.faces, K), mask)


def build_pool(frames, verts, ious, config: RigidFitConfig) -> KeyframePool:
    pool = KeyframePool()
    for i, f in enumerate(frames):
        if ious[i] is None:
            continue
        pool_admit(pool, f, ious[i], config, verts[i])
    return pool


def _moving_average_runs(indices, rot, trans, width, break_t=np.inf, break_r=np.inf):
    """Centred moving average over each run of consecutive indices.

    A run is also cut where the trajectory jumps by more than ``break_t``
    metres or ``break_r`` radians, so a genuine viewpoint change stays sharp.
    """
    h = width // 2
    out_r, out_t = dict(rot), dict(trans)
    runs, cur = [], []
    for i in sorted(indices):
        jump = bool(cur) and (
            np.linalg.norm(trans[i] - trans[cur[-1]]) > break_t
            or geodesic_distance(rot[i], rot[cur[-1]]) > break_r)
        if cur and (i != cur[-1] + 1 or jump):
            runs.append(cur)
            cur = []
        cur.append(i)
    if cur:
        runs.append(cur)
    for run in runs:
        n = len(run)
        rs = [rot[run[0]]]
        for i in run[1:]:
            rs.append(aa_nearest(rot[i], rs[-1]))
        rs = np.array(rs)
        ts = np.array([trans[i] for i in run])
        for j, i in enumerate(run):
            k = min(h, j, n - 1 - j)
            out_r[i] = rs[j - k:j + k + 1].mean(axis=0)
            out_t[i] = ts[j - k:j + k + 1].mean(axis=0)
    return out_r, out_t


def run_rigid_fallback(frames, masks, model: BodyModel, K: CameraIntrinsics,
                       config: RigidFitConfig | None = None, pool: KeyframePool | None = None):
    """Replace failing frames (or all frames in full mode) by rigid fits.

    ``masks`` is a list aligned with ``frames``; ``None`` marks a frame with
    no mask file. Returns ``(frames, report)`` where the report lists one
    :class:`FrameFit` per frame.
    """
    config = config or RigidFitConfig()
    frames = list(frames)
    n = len(frames)
    verts, ious = [None] * n, [None] * n
    report = []
    for i, f in enumerate(frames):
        m = masks[i]
        if f.valid and m is not None and m.any():
            verts[i], ious[i] = frame_iou(model, f, m, K)
        report.append(FrameFit(f.index, ious[i]))

    if pool is None:
        pool = build_pool(frames, verts, ious, config)

    if config.mode == "fallback":
        targets = {i for i in range(n) if ious[i] is not None and ious[i] < config.tau_iou}
    else:
        targets = {i for i in range(n) if ious[i] is not None}
    if not targets:
        return frames, report
    if len(pool) == 0:
        raise RigidFitError("no usable reference")

    pos = {f.index: i for i, f in enumerate(frames)}
    k0 = pos.get(pool.entries[0].frame_index)
    if k0 is None:
        raise RigidFitError("keyframe pool does not match the frame sequence")
    targets.discard(k0)

    # placements already trusted: untouched frames, then fitted ones
    placed = {}
    if config.mode == "fallback":
        for i in range(n):
            if ious[i] is not None and i not in targets:
                placed[i] = (frames[i].rotation, frames[i].translation)
    placed[k0] = (frames[k0].rotation, frames[k0].translation)

    fitted = {k0: placed[k0]}
    fitted_rot, fitted_trans, fitted_ref = {}, {}, {}
    order = [("forward", i) for i in range(k0 + 1, n)] + \
            [("backward", i) for i in range(k0 - 1, -1, -1)]
    for direction, i in order:
        if i not in targets:
            continue
        t = frames[i].index
        ref = select_reference(pool, t, config, direction)
        # start from the nearest trusted placement; regularize toward fitted ones only
        near = _nearest_placed(placed, i, direction)
        init = neighbor = None
        if near is not None:
            init = relative_params(ref, *placed[near])
        nb = _nearest_placed(fitted, i, direction)
        if nb is not None and abs(frames[nb].index - t) <= config.tau_g:
            neighbor = relative_params(ref, *fitted[nb])
        res = fit_frame(ref, masks[i], init, neighbor, K, config, model.faces)
        R_abs, t_abs = absolute_placement(ref, res.params)
        r_abs = matrix_to_aa(R_abs)
        if near is not None:
            r_abs = aa_nearest(r_abs, placed[near][0])
        placed[i] = fitted[i] = (r_abs, t_abs)
        fitted_rot[i], fitted_trans[i], fitted_ref[i] = r_abs, t_abs, ref
        report[i].reference = ref.frame_index
        report[i].iterations = res.iterations
        report[i].fitted = True
        log.debug("frame %d: ref %d, iou %.3f -> %.3f", t, ref.frame_index,
                  ious[i], res.iou_after)

    smooth_r, smooth_t = _moving_average_runs(fitted_rot.keys(), fitted_rot, fitted_trans,
                                              config.traj_window, config.traj_break_translation,
                                              config.traj_break_rotation)
    out = list(frames)
    for i, ref in fitted_ref.items():
        src = ref.record
        rec = FrameRecord(frames[i].index, True, np.array(src.pose, dtype=float),
                          np.array(src.beta, dtype=float), float(src.scale),
                          np.asarray(smooth_r[i], dtype=float),
                          np.asarray(smooth_t[i], dtype=float), frames[i].mask)
        out[i] = rec
        _, report[i].post_iou = frame_iou(model, rec, masks[i], K)
    return out, report


def _nearest_placed(placed: dict, i: int, direction: str):
    best = None
    for j in placed:
        if j == i:
            continue
        d = abs(j - i)
        behind = (j < i) if direction == "forward" else (j > i)
        key = (d, 0 if behind else 1)
        if best is None or key < best[0]:
            best = (key, j)
    return None if best is None else best[1]
