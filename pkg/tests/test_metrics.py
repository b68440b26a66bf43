import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stillmesh.bodymodel import GlobalPlacement, pose_mesh
from stillmesh.geometry import aa_to_matrix, iou, rasterize_silhouette
from stillmesh.metrics import (
    MetricsError, cross_view_iou, cross_view_iou_vertices, evaluate, frame_vertices,
    mesh_mask_iou_series, pa_pve, pose_consistency, reproject, temporal_displacement,
    write_per_frame_csv,
)
from stillmesh.records import FrameRecord
from stillmesh.stabilize import run_stabilizer
from stillmesh.synthgen import NoiseSpec, ScenarioSpec, generate_scenario


def random_similarity(r):
    ax = r.normal(size=3)
    return r.uniform(0.3, 3.0), aa_to_matrix(ax / np.linalg.norm(ax) * r.uniform(0, np.pi)), r.normal(size=3)


# --- mask agreement --------------------------------------------------------

def test_ground_truth_frames_score_high(body, clean_small):
    b = clean_small
    s = mesh_mask_iou_series(b.gt_frames, b.gt_masks, body, b.intrinsics)
    assert np.all(s >= 0.95)


def test_empty_masks_are_gaps(body, clean_small):
    b = clean_small
    masks = list(b.gt_masks)
    masks[3] = np.zeros_like(masks[3])
    masks[5] = None
    s = mesh_mask_iou_series(b.gt_frames, masks, body, b.intrinsics)
    assert np.isnan(s[3]) and np.isnan(s[5]) and np.isfinite(s[4])


def test_constant_mesh_and_mask(body, clean_small):
    b = clean_small
    frames = [b.gt_frames[0].with_(index=i) for i in range(4)]
    s = mesh_mask_iou_series(frames, [b.masks[2]] * 4, body, b.intrinsics)
    assert len(set(s.tolist())) == 1


def test_invalid_record_with_mask_scores_zero(body, clean_small):
    b = clean_small
    frames = [FrameRecord.invalid(0)] + b.gt_frames[1:3]
    assert mesh_mask_iou_series(frames, b.gt_masks[:3], body, b.intrinsics)[0] == 0.0


# --- temporal stability ----------------------------------------------------

def test_displacement_identical_frames():
    V = np.random.default_rng(0).normal(size=(5, 30, 3))
    assert temporal_displacement(np.repeat(V[:1], 5, axis=0)) == 0.0


def test_displacement_uniform_shift():
    d, nv = 0.01, 400
    base = np.random.default_rng(1).normal(size=(nv, 3))
    seq = np.stack([base + [d * t, 0, 0] for t in range(6)])
    assert temporal_displacement(seq) == pytest.approx(d / np.sqrt(nv), rel=1e-12)


def test_displacement_brute_force(rng):
    V = rng.normal(size=(7, 20, 3))
    total = 0.0
    for t in range(1, 7):
        sq = 0.0
        for i in range(20):
            for k in range(3):
                sq += (V[t, i, k] - V[t - 1, i, k]) ** 2
        total += np.sqrt(sq) / 20
    assert temporal_displacement(V) == pytest.approx(total / 6, rel=1e-12)


def test_pose_consistency_closed_forms():
    v = np.linspace(-0.1, 0.2, 72)
    assert pose_consistency(np.tile(v, (5, 1))) == 0.0
    alt = np.array([v if t % 2 == 0 else -v for t in range(6)])
    assert pose_consistency(alt) == pytest.approx(2 * np.linalg.norm(v))


def test_stability_zero_iff_static(rng):
    V = rng.normal(size=(4, 10, 3))
    V[2] = V[1]
    assert temporal_displacement(V) > 0
    assert temporal_displacement(V[1:3]) == 0.0


def test_too_short_sequences():
    with pytest.raises(MetricsError):
        temporal_displacement(np.zeros((1, 3, 3)))
    with pytest.raises(MetricsError):
        pose_consistency(np.zeros((1, 72)))


def test_pose_lock_reduces_pose_delta(body):
    noise = NoiseSpec(pose_jitter_sigma=0.05, outlier_rate=0.05)
    b = generate_scenario(ScenarioSpec(seed=4, n_frames=120, noise=noise), body)
    raw = pose_consistency([f.pose for f in b.pred_frames])
    locked = pose_consistency([f.pose for f in run_stabilizer(b.pred_frames, mode="patient4d")])
    assert locked < raw


# --- cross-view ------------------------------------------------------------

def test_cross_view_lag_zero_is_mean_iou(body, clean_small):
    b = clean_small
    s = mesh_mask_iou_series(b.pred_frames, b.masks, body, b.intrinsics)
    assert cross_view_iou(b.pred_frames, b.masks, body, b.intrinsics, lag=0) == np.nanmean(s)


def test_cross_view_static_truth(body, clean_small):
    b = clean_small
    s = mesh_mask_iou_series(b.gt_frames, b.gt_masks, body, b.intrinsics)
    cv = cross_view_iou(b.gt_frames, b.gt_masks, body, b.intrinsics, lag=20)
    assert abs(cv - s.mean()) <= 0.02


def test_reproject_matches_pose_mesh(body, clean_small):
    f, g = clean_small.gt_frames[0], clean_small.gt_frames[30]
    V = pose_mesh(body, f.pose, f.shape, f.placement)
    np.testing.assert_allclose(reproject(V, f.placement, g.placement),
                               pose_mesh(body, f.pose, f.shape, g.placement), atol=1e-9)


def test_flattened_meshes_lose_cross_view(body, clean_small):
    b = clean_small
    K = b.intrinsics
    verts = frame_vertices(b.gt_frames, body)
    flat = []
    for V in verts:
        z = V[:, 2].mean()
        # squash depth while keeping every vertex on its own viewing ray
        flat.append(V * (z + 0.05 * (V[:, 2:] - z)) / V[:, 2:])
    places = [f.placement for f in b.gt_frames]
    same = cross_view_iou_vertices(flat, places, b.gt_masks, body.faces, K, lag=0)
    cross = cross_view_iou_vertices(flat, places, b.gt_masks, body.faces, K, lag=20)
    assert same >= 0.99
    assert cross < same


def test_cross_view_lag_too_long(body, clean_small):
    b = clean_small
    with pytest.raises(MetricsError):
        cross_view_iou(b.gt_frames, b.gt_masks, body, b.intrinsics, lag=40)


# --- PA-PVE ----------------------------------------------------------------

def test_pa_pve_identity(body):
    V = np.stack([body.template_vertices] * 2)
    assert pa_pve(V, V) < 1e-9


def test_pa_pve_similarity_invariance(body):
    r = np.random.default_rng(9)
    gt = np.stack([body.template_vertices, body.template_vertices * 1.1])
    pred = gt + r.normal(scale=0.01, size=gt.shape)
    base = pa_pve(pred, gt)
    for _ in range(10):
        s, R, t = random_similarity(r)
        assert abs(pa_pve(s * pred @ R.T + t, gt) - base) < 1e-6
    s, R, t = random_similarity(r)
    assert pa_pve(s * gt @ R.T + t, gt) < 1e-3


def test_pa_pve_decimated_matches_oracle(body):
    G = body.template_vertices
    P = G[::3]
    d = np.sqrt(((G[:, None, :] - P[None]) ** 2).sum(-1)).min(axis=1).mean()
    assert pa_pve([P], [G]) == pytest.approx(1000 * d, abs=1e-6)


def test_pa_pve_length_mismatch(body):
    with pytest.raises(MetricsError):
        pa_pve([body.template_vertices], [])


# --- report ----------------------------------------------------------------

@pytest.fixture(scope="module")
def report(body, clean_small):
    b = clean_small
    rep, table = evaluate(b.pred_frames, b.gt_masks, body, b.intrinsics, lag=10,
                          gt_vertices=b.gt_vertices)
    return rep, table


def test_report_invariants(report):
    rep, _ = report
    assert 0 <= rep.pct_below_0_3 <= 100 and 0 <= rep.pct_above_0_6 <= 100
    assert rep.pct_above_0_6 + rep.pct_below_0_3 <= 100
    for v in (rep.mean_iou, rep.delta_mesh, rep.delta_pose, rep.cv_iou_20, rep.pa_pve):
        assert v >= 0
    assert rep.pct_below_0_3 == 0 and rep.delta_pose == 0.0
    assert rep.pa_pve < 0.1


def test_report_deterministic(body, clean_small, report):
    b = clean_small
    again, _ = evaluate(b.pred_frames, b.gt_masks, body, b.intrinsics, lag=10,
                        gt_vertices=b.gt_vertices)
    assert json.dumps(again.to_dict()) == json.dumps(report[0].to_dict())


def test_report_files(tmp_path, report):
    rep, table = report
    rep.to_json(tmp_path / "m.json")
    d = json.loads((tmp_path / "m.json").read_text())
    assert d["mean_iou"] == rep.mean_iou and len(d["per_frame_iou"]) == rep.n_frames
    write_per_frame_csv(tmp_path / "p.csv", table)
    rows = list(csv.reader(open(tmp_path / "p.csv")))
    assert rows[0] == ["frame", "iou", "delta_mesh", "delta_pose"]
    assert len(rows) == rep.n_frames + 1 and rows[1][2] == ""


def test_gap_frames_counted(body, clean_small):
    b = clean_small
    masks = list(b.gt_masks)
    masks[7] = np.zeros_like(masks[7])
    rep, _ = evaluate(b.gt_frames, masks, body, b.intrinsics, lag=5)
    assert rep.n_gap_frames == 1 and rep.per_frame_iou[7] != rep.per_frame_iou[7]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_cross_view_lag0_identity_random(body_small, seed):
    faces, K, verts, places, masks = body_small
    r = np.random.default_rng(seed)
    idx = r.permutation(len(verts))[:6]
    V = [verts[i] for i in idx]
    M = [masks[i] if r.random() > 0.2 else np.zeros_like(masks[i]) for i in idx]
    P = [places[i] for i in idx]
    if not any(m.any() for m in M):
        return
    series = [iou(rasterize_silhouette(v, faces, K), m) if m.any() else np.nan
              for v, m in zip(V, M)]
    assert cross_view_iou_vertices(V, P, M, faces, K, lag=0) == np.nanmean(series)


@pytest.fixture(scope="module")
def body_small(body, clean_small):
    b = clean_small
    verts = frame_vertices(b.pred_frames, body)
    # masks from other frames so the IoUs vary
    masks = b.gt_masks[5:] + b.gt_masks[:5]
    return body.faces, b.intrinsics, verts, [f.placement for f in b.pred_frames], masks
