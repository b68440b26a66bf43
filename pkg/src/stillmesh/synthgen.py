"""Synthetic ground truth: a static recumbent body seen by an orbiting camera.

The generator produces exact per-frame parameters and silhouettes together
with corrupted "predictions" (jitter, outliers, dropouts, occlusions) and a
log of every corruption, so pipeline behaviour can be checked against truth.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .bodymodel import BodyModel, GlobalPlacement, ShapeParams, pose_mesh
from .geometry import CameraIntrinsics, aa_to_matrix, matrix_to_aa, rasterize_silhouette
from .records import FrameRecord

N_JOINTS = 24
N_BETAS = 10

# SMPL joint order
PARENTS = np.array([-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14,
                    16, 17, 18, 19, 20, 21])
LEFT = (1, 4, 7, 10, 13, 16, 18, 20, 22)

_JOINTS_LEFT_AND_MID = {
    0: (0.0, 0.0, 0.0),
    1: (0.09, -0.07, 0.0),
    3: (0.0, 0.11, 0.0),
    4: (0.10, -0.47, 0.01),
    6: (0.0, 0.24, 0.0),
    7: (0.10, -0.87, -0.02),
    9: (0.0, 0.30, 0.0),
    10: (0.10, -0.92, 0.10),
    12: (0.0, 0.52, 0.0),
    13: (0.07, 0.44, 0.0),
    15: (0.0, 0.60, 0.02),
    16: (0.18, 0.46, 0.0),
    18: (0.44, 0.46, 0.0),
    20: (0.68, 0.46, 0.0),
    22: (0.76, 0.46, 0.0),
}

# joint -> (segment end, (ra, rb) at start, (ra, rb) at end)
_SEGMENTS = {
    0: ((0.0, 0.13, 0.0), (0.155, 0.11), (0.145, 0.10)),
    3: ((0.0, 0.26, 0.0), (0.145, 0.10), (0.14, 0.10)),
    6: ((0.0, 0.32, 0.0), (0.14, 0.10), (0.15, 0.105)),
    9: ((0.0, 0.46, 0.0), (0.16, 0.105), (0.17, 0.09)),
    12: ((0.0, 0.60, 0.02), (0.05, 0.05), (0.05, 0.05)),
    15: ((0.0, 0.76, 0.02), (0.08, 0.09), (0.08, 0.09)),
    13: ((0.18, 0.46, 0.0), (0.05, 0.05), (0.055, 0.055)),
    16: ((0.44, 0.46, 0.0), (0.05, 0.05), (0.04, 0.04)),
    18: ((0.68, 0.46, 0.0), (0.04, 0.04), (0.03, 0.03)),
    20: ((0.76, 0.46, 0.0), (0.035, 0.015), (0.035, 0.015)),
    22: ((0.84, 0.46, 0.0), (0.035, 0.013), (0.03, 0.012)),
    1: ((0.10, -0.47, 0.01), (0.085, 0.085), (0.055, 0.055)),
    4: ((0.10, -0.87, -0.02), (0.055, 0.055), (0.04, 0.04)),
    7: ((0.10, -0.92, 0.10), (0.04, 0.04), (0.035, 0.035)),
    10: ((0.10, -0.93, 0.18), (0.04, 0.025), (0.035, 0.02)),
}

TORSO = (0, 3, 6, 9)
ARM = (13, 16, 18, 20, 22)
LEG = (1, 4, 7, 10)
HEAD = (12, 15)

_AROUND = 12
_ALONG = 6
_CAP = 3


def _capsule(start, end, r0, r1):
    """Vertices, faces, axial parameter and ring centres of one limb capsule."""
    start, end = np.asarray(start, float), np.asarray(end, float)
    axis = end - start
    length = np.linalg.norm(axis)
    d = axis / length
    ref = np.array([0.0, 1.0, 0.0]) if abs(d[0]) > 0.7 else np.array([1.0, 0.0, 0.0])
    a = ref - (ref @ d) * d
    a /= np.linalg.norm(a)
    b = np.cross(d, a)
    psi = 2.0 * np.pi * np.arange(_AROUND) / _AROUND
    cos_psi, sin_psi = np.cos(psi), np.sin(psi)

    rings = []  # (t, axial offset, radial factor)
    for k in range(_CAP, 0, -1):
        lat = 0.5 * np.pi * k / (_CAP + 1)
        rings.append((0.0, -np.sin(lat), np.cos(lat)))
    for i in range(_ALONG):
        rings.append((i / (_ALONG - 1), 0.0, 1.0))
    for k in range(1, _CAP + 1):
        lat = 0.5 * np.pi * k / (_CAP + 1)
        rings.append((1.0, np.sin(lat), np.cos(lat)))

    verts, tpar, centers = [], [], []
    for t, ax, rf in rings:
        ra = (1 - t) * r0[0] + t * r1[0]
        rb = (1 - t) * r0[1] + t * r1[1]
        rm = 0.5 * (ra + rb)
        c = start + t * axis + ax * rm * d
        for cp, sp in zip(cos_psi, sin_psi):
            verts.append(c + rf * (ra * cp * a + rb * sp * b))
            centers.append(c)
            tpar.append(t + ax * rm / length)
    rm0, rm1 = 0.5 * sum(r0), 0.5 * sum(r1)
    for pole, t in ((start - rm0 * d, -rm0 / length), (end + rm1 * d, 1.0 + rm1 / length)):
        verts.append(pole)
        centers.append(pole)
        tpar.append(t)

    n_rings = len(rings)
    faces = []
    for r in range(n_rings - 1):
        for k in range(_AROUND):
            i0 = r * _AROUND + k
            i1 = r * _AROUND + (k + 1) % _AROUND
            j0, j1 = i0 + _AROUND, i1 + _AROUND
            faces.append((i0, i1, j1))
            faces.append((i0, j1, j0))
    south, north = n_rings * _AROUND, n_rings * _AROUND + 1
    last = (n_rings - 1) * _AROUND
    for k in range(_AROUND):
        faces.append((south, (k + 1) % _AROUND, k))
        faces.append((north, last + k, last + (k + 1) % _AROUND))
    joint_ring = np.arange(_CAP * _AROUND, (_CAP + 1) * _AROUND)
    return (np.array(verts), np.array(faces, dtype=np.int64), np.array(tpar),
            np.array(centers), joint_ring)


def make_procedural_body(joints: int = 24) -> BodyModel:
    """Capsule-limbed 24-joint body with SMPL joint ordering and 10 shape directions.

    The construction is exactly left-right symmetric: left limbs are built
    once and mirrored through the sagittal plane (x = 0).
    """
    if joints != N_JOINTS:
        raise ValueError("the procedural body only supports the 24-joint tree")
    rest = np.zeros((N_JOINTS, 3))
    for j, p in _JOINTS_LEFT_AND_MID.items():
        rest[j] = p
    for j in LEFT:
        rest[j + 1] = rest[j] * np.array([-1.0, 1.0, 1.0])

    parts = []  # (joint, verts, faces, tpar, centers, ring, mirrored)
    for j in sorted(_SEGMENTS):
        end, r0, r1 = _SEGMENTS[j]
        parts.append((j, *_capsule(rest[j], end, r0, r1), False))
    for part in list(parts):
        j, v, f, t, c, ring, _ = part
        if j in LEFT:
            flip = np.array([-1.0, 1.0, 1.0])
            parts.append((j + 1, v * flip, f[:, ::-1].copy(), t, c * flip, ring, True))

    all_v, all_f, weights, sdirs = [], [], [], []
    reg_rows = {}
    offset = 0
    for j, v, f, t, c, ring, mirrored in parts:
        n = len(v)
        all_v.append(v)
        all_f.append(f + offset)
        w = np.zeros((n, N_JOINTS))
        if PARENTS[j] >= 0:
            wp = 0.5 * np.clip(1.0 - t / 0.25, 0.0, 1.0)
            w[:, PARENTS[j]] = wp
            w[:, j] = 1.0 - wp
        else:
            w[:, j] = 1.0
        weights.append(w)
        sdirs.append(_shape_dirs(j - 1 if mirrored else j, v, c, mirrored))
        reg_rows[j] = ring + offset
        offset += n

    V = np.concatenate(all_v)
    regressor = np.zeros((N_JOINTS, len(V)))
    for j, idx in reg_rows.items():
        regressor[j, idx] = 1.0 / len(idx)
    return BodyModel(
        template_vertices=V,
        faces=np.concatenate(all_f),
        rest_joints=rest,
        parent=PARENTS.copy(),
        skin_weights=np.concatenate(weights),
        shape_dirs=np.concatenate(sdirs),
        joint_regressor=regressor,
    )


def _shape_dirs(j, v, centers, mirrored):
    """Per-unit-beta displacements, authored for the left side and mirrored."""
    flip = np.array([-1.0, 1.0, 1.0])
    if mirrored:
        v, centers = v * flip, centers * flip
    rad = v - centers
    n = len(v)
    S = np.zeros((n, 3, N_BETAS))
    ey, ex, ez = np.eye(3)[1], np.eye(3)[0], np.eye(3)[2]
    S[:, :, 0] = 0.04 * rad
    S[:, :, 1] = 0.03 * v[:, 1:2] * ey
    if j in ARM or j in LEG:
        S[:, :, 2] = 0.05 * rad
    if j in TORSO:
        S[:, :, 3] = 0.05 * rad
        S[:, :, 9] = 0.06 * rad[:, 2:3] * ez
    if j in LEG:
        S[:, :, 4] = 0.05 * (v[:, 1:2] + 0.07) * ey
        S[:, :, 7] = 0.015 * ex
    if j in ARM:
        S[:, :, 5] = 0.05 * (v[:, 0:1] - 0.07) * ex
        S[:, :, 6] = 0.02 * ex
    if j in HEAD:
        S[:, :, 8] = 0.06 * (v - np.array(_JOINTS_LEFT_AND_MID[15]))
    if mirrored:
        S = S * flip[None, :, None]
    return S


def recumbent_pose() -> np.ndarray:
    """Arms lowered to the sides, slight elbow and knee flexion."""
    pose = np.zeros((N_JOINTS, 3))
    pose[16] = (0.0, 0.0, -1.25)
    pose[17] = (0.0, 0.0, 1.25)
    pose[18] = (0.0, -0.2, 0.0)
    pose[19] = (0.0, 0.2, 0.0)
    pose[4] = (0.12, 0.0, 0.0)
    pose[5] = (0.12, 0.0, 0.0)
    pose[15] = (-0.1, 0.0, 0.0)
    return pose.reshape(-1)


# ---------------------------------------------------------------------------
# scenario

OCCLUSION_MODES = ("shift", "crop", "erode")


@dataclass
class NoiseSpec:
    pose_jitter_sigma: float = 0.0          # rad per joint
    translation_jitter_sigma: float = 0.0   # m per axis
    rotation_jitter_sigma: float = 0.0      # rad, global rotation
    shape_jitter_sigma: float = 0.0         # per beta component; scale jitter is a tenth of it
    outlier_rate: float = 0.0
    outlier_magnitude: float = 1.0          # rad
    dropout_rate: float = 0.0
    occlusion_windows: list = field(default_factory=list)  # (start, end, visible_fraction)
    # "shift": the camera slides sideways so part of the body leaves the frame
    # "crop" / "erode": the mask alone shrinks, as under a drape
    occlusion_mode: str = "shift"

    def validate(self, n_frames: int) -> None:
        for name in ("outlier_rate", "dropout_rate"):
            r = getattr(self, name)
            if not 0.0 <= r <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        for name in ("pose_jitter_sigma", "translation_jitter_sigma",
                     "rotation_jitter_sigma", "shape_jitter_sigma", "outlier_magnitude"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        for win in self.occlusion_windows:
            s, e, frac = win
            if not (0 <= s <= e < n_frames):
                raise ValueError(f"occlusion window {win} outside [0, {n_frames})")
            if not 0.0 < frac <= 1.0:
                raise ValueError("visible_fraction must lie in (0, 1]")
        if self.occlusion_mode not in OCCLUSION_MODES:
            raise ValueError(f"occlusion_mode must be one of {OCCLUSION_MODES}")


def standard_noise(n_frames: int = 375) -> NoiseSpec:
    """The corrupted-bundle recipe used by the ablation checks."""
    start = int(0.4 * n_frames)
    return NoiseSpec(pose_jitter_sigma=0.05, translation_jitter_sigma=0.01,
                     rotation_jitter_sigma=0.02, shape_jitter_sigma=0.1,
                     outlier_rate=0.05, outlier_magnitude=1.0, dropout_rate=0.02,
                     occlusion_windows=[(start, start + 20, 0.2)])


@dataclass
class ScenarioSpec:
    seed: int = 0
    n_frames: int = 375
    fps: float = 25.0
    orbit_degrees: float = 360.0
    orbit_radius: float = 2.5
    camera_height: float = 1.5
    width: int = 760
    height: int = 428
    base_pose: list | None = None
    base_beta: list | None = None
    base_scale: float = 1.0
    noise: NoiseSpec = field(default_factory=NoiseSpec)

    def pose(self) -> np.ndarray:
        return recumbent_pose() if self.base_pose is None else np.asarray(self.base_pose, float)

    def shape(self) -> ShapeParams:
        beta = np.zeros(N_BETAS) if self.base_beta is None else np.asarray(self.base_beta, float)
        return ShapeParams(beta, self.base_scale)

    def intrinsics(self) -> CameraIntrinsics:
        f = 0.9 * self.width
        return CameraIntrinsics(f, f, self.width / 2.0, self.height / 2.0, self.width, self.height)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["noise"]["occlusion_windows"] = [list(w) for w in self.noise.occlusion_windows]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioSpec":
        d = dict(d)
        d.pop("intrinsics", None)
        noise = d.pop("noise", {}) or {}
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown scenario keys: {sorted(unknown)}")
        nkeys = set(NoiseSpec.__dataclass_fields__)
        if set(noise) - nkeys:
            raise ValueError(f"unknown noise keys: {sorted(set(noise) - nkeys)}")
        noise = dict(noise)
        noise["occlusion_windows"] = [tuple(w) for w in noise.get("occlusion_windows", [])]
        return cls(noise=NoiseSpec(**noise), **d)


# body-to-world: model +y (head) -> world +x, model +z (front) -> world +y (up)
BODY_TO_WORLD = np.array([[0.0, 1.0, 0.0],
                          [0.0, 0.0, 1.0],
                          [1.0, 0.0, 0.0]])
BODY_WORLD_OFFSET = np.array([0.0, 0.8, 0.0])


def camera_extrinsics(spec: ScenarioSpec, t: float, target: np.ndarray):
    """World-to-camera ``(R, t)`` for (possibly fractional) frame ``t``."""
    phi = np.deg2rad(spec.orbit_degrees) * t / spec.n_frames
    pos = target + np.array([spec.orbit_radius * np.cos(phi), spec.camera_height,
                             spec.orbit_radius * np.sin(phi)])
    z = target - pos
    z /= np.linalg.norm(z)
    x = np.cross(z, np.array([0.0, 1.0, 0.0]))
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return R, -R @ pos


def _world_target(model: BodyModel, spec: ScenarioSpec) -> np.ndarray:
    body = pose_mesh(model, spec.pose(), spec.shape(), GlobalPlacement.identity())
    return body.mean(axis=0) @ BODY_TO_WORLD.T + BODY_WORLD_OFFSET


def gt_placement(model: BodyModel, spec: ScenarioSpec, t: float,
                 target: np.ndarray | None = None) -> GlobalPlacement:
    if target is None:
        target = _world_target(model, spec)
    R_cw, t_cw = camera_extrinsics(spec, t, target)
    R = R_cw @ BODY_TO_WORLD
    return GlobalPlacement(matrix_to_aa(R), R_cw @ BODY_WORLD_OFFSET + t_cw)


def _check_radius(model: BodyModel, spec: ScenarioSpec, target: np.ndarray) -> None:
    body = pose_mesh(model, spec.pose(), spec.shape(), GlobalPlacement.identity())
    world = body @ BODY_TO_WORLD.T + BODY_WORLD_OFFSET
    horiz = np.linalg.norm((world - target)[:, [0, 2]], axis=1).max()
    if spec.orbit_radius <= horiz + 0.1:
        raise ValueError(f"orbit radius {spec.orbit_radius} m too small: body reaches {horiz:.2f} m "
                         "from the orbit centre")


def _perturb_rotation(aa, sigma, rng):
    """Compose ``aa`` with a random rotation of expected magnitude ~ sigma."""
    if sigma == 0:
        return np.asarray(aa, float).copy()
    noise = rng.normal(scale=sigma / np.sqrt(3.0), size=3)
    return matrix_to_aa(aa_to_matrix(aa) @ aa_to_matrix(noise))


def _random_rotation(magnitude, rng):
    v = rng.normal(size=3)
    return magnitude * v / np.linalg.norm(v)


def _visible_shift(V: np.ndarray, faces: np.ndarray, K: CameraIntrinsics, fraction: float) -> float:
    """Sideways camera offset (m) leaving ``fraction`` of the silhouette area in frame."""
    def area(s):
        return int(rasterize_silhouette(V - np.array([s, 0.0, 0.0]), faces, K).sum())

    full = area(0.0)
    goal = fraction * full
    if full == 0 or fraction >= 1.0:
        return 0.0
    lo, hi = 0.0, 0.25
    while area(hi) > goal:
        lo, hi = hi, 2.0 * hi
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        if area(mid) > goal:
            lo = mid
        else:
            hi = mid
    # whichever end lands closer to the requested area
    return lo if abs(area(lo) - goal) <= abs(area(hi) - goal) else hi


def _occlude(mask: np.ndarray, fraction: float, mode: str) -> np.ndarray:
    area = int(mask.sum())
    keep = int(round(fraction * area))
    if keep >= area:
        return mask.copy()
    out = np.zeros_like(mask)
    if keep == 0:
        return out
    if mode == "erode":
        score = ndimage.distance_transform_edt(mask)
    else:
        # a drape over everything below a horizontal line: keep the top rows
        rows = np.broadcast_to(np.arange(mask.shape[0])[:, None], mask.shape)
        score = -rows.astype(float)
    flat = np.where(mask.ravel(), score.ravel(), -np.inf)
    order = np.argsort(-flat, kind="stable")[:keep]
    out.ravel()[order] = True
    return out


@dataclass
class Bundle:
    spec: ScenarioSpec
    intrinsics: CameraIntrinsics
    gt_frames: list
    pred_frames: list
    gt_masks: list
    masks: list
    gt_vertices: np.ndarray
    injection_log: list


def generate_scenario(spec: ScenarioSpec, model: BodyModel) -> Bundle:
    """Build a fully deterministic scenario in memory (see ``write_bundle``)."""
    if spec.n_frames < 2:
        raise ValueError("n_frames must be at least 2")
    spec.noise.validate(spec.n_frames)
    K = spec.intrinsics()
    target = _world_target(model, spec)
    _check_radius(model, spec, target)
    pose, shape = spec.pose(), spec.shape()
    nz = spec.noise
    rng = np.random.default_rng(spec.seed)
    T = spec.n_frames

    # corruption schedule drawn up front, sequentially
    outlier = rng.random(T) < nz.outlier_rate
    dropout = rng.random(T) < nz.dropout_rate
    occluded = np.zeros(T, dtype=bool)
    visible = np.ones(T)
    for s, e, frac in nz.occlusion_windows:
        occluded[s:e + 1] = True
        visible[s:e + 1] = frac
    dropout &= ~occluded
    outlier &= ~dropout

    gt_frames, pred_frames, gt_masks, masks, verts, log = [], [], [], [], [], []
    jitter = any((nz.pose_jitter_sigma, nz.translation_jitter_sigma,
                  nz.rotation_jitter_sigma, nz.shape_jitter_sigma))
    for t in range(T):
        place = gt_placement(model, spec, t, target)
        if occluded[t] and nz.occlusion_mode == "shift" and visible[t] < 1.0:
            V = pose_mesh(model, pose, shape, place)
            dx = _visible_shift(V, model.faces, K, visible[t])
            place = GlobalPlacement(place.rotation, place.translation - np.array([dx, 0.0, 0.0]))
        gt = FrameRecord(t, True, pose.copy(), shape.beta.copy(), shape.scale,
                         place.rotation.copy(), place.translation.copy(), f"gt_masks/{t:06d}.pgm")
        V = pose_mesh(model, pose, shape, place)
        gm = rasterize_silhouette(V, model.faces, K)
        gt_frames.append(gt)
        gt_masks.append(gm)
        verts.append(V.astype("<f4"))

        kinds = []
        if dropout[t]:
            pred_frames.append(FrameRecord.invalid(t))
            masks.append(np.zeros_like(gm))
            log.append({"frame": t, "types": ["dropout"]})
            continue
        p_pose = pose.reshape(N_JOINTS, 3).copy()
        if nz.pose_jitter_sigma > 0:
            p_pose += rng.normal(scale=nz.pose_jitter_sigma / np.sqrt(3.0), size=p_pose.shape)
        rot = _perturb_rotation(place.rotation, nz.rotation_jitter_sigma, rng)
        trans = place.translation + (rng.normal(scale=nz.translation_jitter_sigma, size=3)
                                     if nz.translation_jitter_sigma > 0 else 0.0)
        beta = shape.beta + (rng.normal(scale=nz.shape_jitter_sigma, size=N_BETAS)
                             if nz.shape_jitter_sigma > 0 else 0.0)
        scale = shape.scale * (1.0 + (0.1 * nz.shape_jitter_sigma * rng.normal()
                                      if nz.shape_jitter_sigma > 0 else 0.0))
        if jitter:
            kinds.append("jitter")
        if outlier[t] or occluded[t]:
            joints = rng.choice(np.arange(1, N_JOINTS), size=4, replace=False)
            for j in joints:
                p_pose[j] = matrix_to_aa(aa_to_matrix(p_pose[j]) @
                                         aa_to_matrix(_random_rotation(nz.outlier_magnitude, rng)))
            rot = matrix_to_aa(aa_to_matrix(rot) @
                               aa_to_matrix(_random_rotation(nz.outlier_magnitude, rng)))
            kinds.append("occlusion" if occluded[t] else "outlier")
        mask = gm
        if occluded[t] and visible[t] < 1.0 and nz.occlusion_mode != "shift":
            mask = _occlude(gm, visible[t], nz.occlusion_mode)
        pred_frames.append(FrameRecord(t, True, p_pose.reshape(-1), np.asarray(beta, float),
                                       float(scale), rot, np.asarray(trans, float),
                                       f"masks/{t:06d}.pgm"))
        masks.append(mask)
        if kinds:
            log.append({"frame": t, "types": kinds})

    return Bundle(spec, K, gt_frames, pred_frames, gt_masks, masks,
                  np.stack(verts), log)


def write_bundle(bundle: Bundle, model: BodyModel, out_dir) -> Path:
    from . import io

    out = Path(out_dir)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    (out / "gt_masks").mkdir(parents=True, exist_ok=True)
    io.save_model(model, out / "model.json")
    io.write_frames(out / "gt_frames.jsonl", bundle.gt_frames)
    io.write_frames(out / "pred_frames.jsonl", bundle.pred_frames)
    for t, (m, g) in enumerate(zip(bundle.masks, bundle.gt_masks)):
        io.write_pgm(out / "masks" / f"{t:06d}.pgm", m)
        io.write_pgm(out / "gt_masks" / f"{t:06d}.pgm", g)
    io.write_vertices(out / "gt_vertices.f32", bundle.gt_vertices)
    (out / "injection_log.json").write_text(json.dumps(bundle.injection_log, indent=1) + "\n")
    scen = bundle.spec.to_dict()
    scen["intrinsics"] = bundle.intrinsics.to_dict()
    (out / "scenario.json").write_text(json.dumps(scen, indent=2) + "\n")
    return out
