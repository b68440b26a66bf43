import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import angle_between, geodesic_cost, geodesic_l1_median, samples_near
from stillmesh.bodymodel import ShapeParams
from stillmesh.geometry import geodesic_distance
from stillmesh.io import record_to_json
from stillmesh.records import FrameRecord
from stillmesh.stabilize import (
    MODES, GroupState, Stabilizer, StabilizeError, StabilizerConfig, classify_segment,
    compute_anchor, interpolate_gaps, lock_shape, median_filter, pose_lock_step, reject_outlier,
    run_stabilizer,
)
from stillmesh.synthgen import NoiseSpec, ScenarioSpec, generate_scenario


def rec(i, pose=None, beta=None, scale=1.0, rot=(0, 0, 0), trans=(0, 0, 3)):
    pose = np.zeros(72) if pose is None else np.asarray(pose, float)
    beta = np.zeros(10) if beta is None else np.asarray(beta, float)
    return FrameRecord(i, True, pose, beta, scale, np.asarray(rot, float), np.asarray(trans, float))


def dump(frames):
    return "\n".join(json.dumps(record_to_json(f)) for f in frames)


# --- outlier rejection -----------------------------------------------------

def test_reject_under_threshold():
    s = GroupState(np.zeros(3))
    p = np.array([0.5, 0, 0])
    acc, rej = reject_outlier(s, p, 0.6, 3, 0.5)
    assert np.array_equal(acc, p) and not rej


def test_reject_over_threshold():
    s = GroupState(np.zeros(3))
    acc, rej = reject_outlier(s, [0.7, 0, 0], 0.6, 3, 0.5)
    assert np.array_equal(acc, np.zeros(3)) and rej and s.reject_count == 1


def test_force_accept_after_n_max():
    s = GroupState(np.zeros(3))
    p = np.array([2.0, -1.0, 0.5])
    for _ in range(3):
        _, rej = reject_outlier(s, p, 0.6, 3, 0.5)
        assert rej
    acc, rej = reject_outlier(s, p, 0.6, 3, 0.5)
    assert not rej and s.reject_count == 0
    np.testing.assert_allclose(acc, 0.5 * p)


def test_first_prediction_always_accepted():
    s = GroupState()
    acc, rej = reject_outlier(s, [100.0, 0, 0], 0.6, 3, 0.5)
    assert acc[0] == 100.0 and not rej


def test_reject_dimension_mismatch():
    with pytest.raises(StabilizeError, match="dimension"):
        reject_outlier(GroupState(np.zeros(3)), np.zeros(4), 0.6, 3, 0.5)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 6), st.floats(0.1, 1.0), st.lists(st.floats(-3, 3), min_size=3, max_size=3))
def test_rejection_recovery_moves_toward_prediction(n_max, blend, vals):
    p = np.asarray(vals)
    if np.linalg.norm(p) <= 0.6:
        p = p + 1.0
    s = GroupState(np.zeros(3))
    for _ in range(n_max):
        reject_outlier(s, p, 0.6, n_max, blend)
        assert 0 <= s.reject_count <= n_max
    acc, _ = reject_outlier(s, p, 0.6, n_max, blend)
    assert np.linalg.norm(p - acc) < np.linalg.norm(p)


# --- shape lock ------------------------------------------------------------

def test_lock_shape_broadcasts_keyframe():
    frames = [rec(i, beta=np.full(10, b), scale=1 + b) for i, b in enumerate((0.1, 0.2, 0.3))]
    out = lock_shape(frames, frames[1].shape)
    for f, o in zip(frames, out):
        assert np.array_equal(o.beta, frames[1].beta) and o.scale == frames[1].scale
        assert np.array_equal(o.pose, f.pose) and o.index == f.index


def test_lock_shape_single_frame():
    f = rec(0, beta=np.arange(10.0))
    assert lock_shape([f], f.shape)[0].params_equal(f)


def test_locked_beta_has_no_variance(body):
    noise = NoiseSpec(pose_jitter_sigma=0.05, shape_jitter_sigma=0.1, outlier_rate=0.05)
    b = generate_scenario(ScenarioSpec(seed=3, n_frames=60, noise=noise), body)
    out = run_stabilizer(b.pred_frames, mode="patient4d")
    betas = np.array([f.beta for f in out])
    # identical rows, so the per-dimension variance is zero
    assert np.array_equal(betas, np.broadcast_to(betas[0], betas.shape))
    assert len({f.scale for f in out}) == 1


# --- median filter ---------------------------------------------------------

def test_median_constant():
    x = np.full((10, 3), 0.7)
    assert np.array_equal(median_filter(x, 5), x)


def test_median_removes_spike():
    x = np.zeros(9)
    x[4] = 5.0
    assert not median_filter(x, 3).any()


def test_median_matches_brute_force(rng):
    x = rng.normal(size=(20, 5))
    out = median_filter(x, 7)
    for i in range(20):
        k = min(3, i, 19 - i)
        for d in range(5):
            window = sorted(x[i - k:i + k + 1, d])
            assert out[i, d] == window[len(window) // 2]


def test_median_window_must_be_odd():
    with pytest.raises(StabilizeError):
        median_filter(np.zeros(5), 4)


# --- segment classification ------------------------------------------------

def test_identical_poses_static():
    assert classify_segment(np.ones((7, 72)), 0.05) == "static"


def test_large_steps_dynamic():
    poses = np.outer(np.arange(7.0), np.eye(72)[0])
    assert classify_segment(poses, 0.05) == "dynamic"


def test_threshold_tie_is_dynamic():
    poses = np.outer(np.arange(7.0) * 0.25, np.eye(72)[0])
    assert classify_segment(poses, 0.25) == "dynamic"


# --- anchor ----------------------------------------------------------------

def test_anchor_identical_rows():
    v = np.linspace(-1, 1, 72)
    assert np.array_equal(compute_anchor(np.tile(v, (48, 1))), v)


def test_anchor_column_median():
    assert compute_anchor([[0.3], [0.1], [0.2]])[0] == 0.2


def test_anchor_even_count_lower_middle():
    assert compute_anchor([[0.4], [0.1], [0.3], [0.2]])[0] == 0.2


def test_anchor_empty_buffer():
    with pytest.raises(StabilizeError):
        compute_anchor(np.zeros((0, 72)))


def test_anchor_near_geodesic_median_per_joint():
    rng = np.random.default_rng(7)
    base = samples_near(np.zeros(3), 24, 1.5, rng)
    rows = np.concatenate([samples_near(b, 48, 0.25, rng) for b in base], axis=1)
    anchor = compute_anchor(rows)
    for j in range(24):
        cols = rows[:, 3 * j:3 * j + 3]
        med = geodesic_l1_median(cols)
        assert angle_between(med, anchor[3 * j:3 * j + 3]) < 0.05


def test_geodesic_oracle_is_a_minimum():
    rng = np.random.default_rng(3)
    from scipy.spatial.transform import Rotation
    pts = samples_near(np.array([0.4, 1.0, -0.3]), 48, 0.3, rng)
    med = geodesic_l1_median(pts)
    c0 = geodesic_cost(med, pts)
    for d in rng.normal(scale=1e-3, size=(100, 3)):
        assert c0 <= geodesic_cost(med * Rotation.from_rotvec(d), pts) + 1e-12


# --- pose locking ----------------------------------------------------------

def test_pose_lock_fixed_point():
    v = np.linspace(0, 1, 72)
    np.testing.assert_allclose(pose_lock_step(v, v, v, 0.01, 0.005), v, atol=1e-15)


def test_pose_lock_alpha_one():
    p = np.ones(72)
    assert np.array_equal(pose_lock_step(np.zeros(72), p, -p, 1.0, 0.3), p)


def test_pose_lock_pure_anchor():
    a = np.full(72, 0.4)
    assert np.array_equal(pose_lock_step(np.zeros(72), np.ones(72), a, 0.0, 1.0), a)


@pytest.mark.parametrize("alpha, alpha_a", [(0.01, 0.005), (0.3, 0.005), (0.05, 0.5)])
def test_pose_lock_converges_to_closed_form(alpha, alpha_a):
    pred = np.linspace(-1, 1, 72)
    anchor = np.linspace(0.5, -0.2, 72)
    x = np.zeros(72)
    for _ in range(20000):
        x = pose_lock_step(x, pred, anchor, alpha, alpha_a)
    limit = (alpha * pred + (1 - alpha) * alpha_a * anchor) / (alpha + (1 - alpha) * alpha_a)
    np.testing.assert_allclose(x, limit, atol=1e-9)


# --- gap interpolation -----------------------------------------------------

def test_gap_midpoint_translation():
    out = interpolate_gaps([rec(0, trans=(0, 0, 1)), FrameRecord.invalid(1), rec(2, trans=(0, 0, 3))])
    np.testing.assert_allclose(out[1].translation, [0, 0, 2])
    assert out[1].valid and out[1].index == 1


def test_leading_gap_holds():
    out = interpolate_gaps([FrameRecord.invalid(0, "m0"), rec(1, trans=(1, 2, 3))])
    np.testing.assert_array_equal(out[0].translation, [1, 2, 3])
    assert out[0].index == 0 and out[0].mask == "m0"


def test_trailing_gap_holds():
    out = interpolate_gaps([rec(0, trans=(1, 2, 3)), FrameRecord.invalid(1), FrameRecord.invalid(2)])
    np.testing.assert_array_equal(out[2].translation, [1, 2, 3])


def test_rotation_gap_geodesic():
    out = interpolate_gaps([rec(0), FrameRecord.invalid(1), rec(2, rot=(0, 0, np.pi / 2))])
    np.testing.assert_allclose(out[1].rotation, [0, 0, np.pi / 4], atol=1e-12)


def test_gap_fractions():
    out = interpolate_gaps([rec(0, pose=np.zeros(72)), FrameRecord.invalid(1), FrameRecord.invalid(2),
                            rec(3, pose=np.full(72, 0.3))])
    np.testing.assert_allclose(out[1].pose, 0.1)
    np.testing.assert_allclose(out[2].pose, 0.2)


def test_all_gaps_error():
    with pytest.raises(StabilizeError, match="no valid frame"):
        interpolate_gaps([FrameRecord.invalid(0)])


# --- streaming stabilizer --------------------------------------------------

@pytest.mark.parametrize("mode", MODES)
def test_constant_input_is_fixed_point(mode):
    pose = np.random.default_rng(0).normal(scale=0.3, size=72)
    frames = [rec(i, pose=pose, beta=np.full(10, 0.2), rot=(0.1, 0.2, 0.3), trans=(0.1, 0, 2.5))
              for i in range(80)]
    out = run_stabilizer(frames, mode=mode)
    assert len(out) == 80
    for a, b in zip(frames, out):
        assert a.params_equal(b, tol=1e-9)


def test_patient4d_passes_clean_orbit(clean_small):
    out = run_stabilizer(clean_small.pred_frames, mode="patient4d")
    for a, b in zip(clean_small.pred_frames, out):
        assert a.params_equal(b, tol=1e-9)


def test_outliers_replaced_by_last_accepted(body):
    noise = NoiseSpec(outlier_rate=0.05)
    b = generate_scenario(ScenarioSpec(seed=7, n_frames=120, noise=noise), body)
    outliers = [e["frame"] for e in b.injection_log if "outlier" in e["types"]]
    assert outliers
    stab = Stabilizer(mode="outlier_only")
    out = stab.push(b.pred_frames) + stab.flush()
    flagged = [i for i, r in enumerate(stab.rejections["theta"]) if r]
    assert flagged == outliers
    for t in outliers:
        last = max(i for i in range(t) if i not in outliers)
        np.testing.assert_array_equal(out[t].pose, b.pred_frames[last].pose)
        np.testing.assert_array_equal(out[t].rotation, b.pred_frames[last].rotation)
    for t in set(range(120)) - set(outliers):
        assert out[t].params_equal(b.pred_frames[t])


def test_locked_output_within_hull(rng):
    base = rng.normal(scale=0.3, size=72)
    frames = [rec(i, pose=base + rng.normal(scale=0.02, size=72)) for i in range(120)]
    stab = Stabilizer(StabilizerConfig(warmup=20), mode="outlier_smooth_lock")
    out = stab.push(frames) + stab.flush()
    P = np.array([f.pose for f in frames])  # all accepted: deltas stay below tau
    lo, hi = P.min(axis=0), P.max(axis=0)
    for o in out:
        assert np.all(o.pose >= lo - 1e-12) and np.all(o.pose <= hi + 1e-12)


def test_anchor_reset_on_large_motion():
    cfg = StabilizerConfig(warmup=10, motion_reset=0.3, tau_theta=10.0)
    frames = [rec(i, pose=np.zeros(72)) for i in range(30)]
    frames += [rec(i, pose=np.full(72, 0.5)) for i in range(30, 60)]
    stab = Stabilizer(cfg, mode="patient4d")
    stab.push(frames)
    stab.flush()
    assert stab.state.anchor_resets >= 1
    np.testing.assert_allclose(stab.state.anchor, 0.5)


def test_empty_input_error():
    with pytest.raises(StabilizeError):
        run_stabilizer([])


def test_unknown_mode():
    with pytest.raises(StabilizeError):
        Stabilizer(mode="bogus")


def test_config_validation():
    with pytest.raises(StabilizeError):
        StabilizerConfig(median_window=4)
    with pytest.raises(StabilizeError):
        StabilizerConfig(tau_c=0.0)
    with pytest.raises(StabilizeError):
        StabilizerConfig(ema_static=1.5)


def noisy_sequence(seed, n):
    r = np.random.default_rng(seed)
    base = r.normal(scale=0.3, size=72)
    frames = []
    for i in range(n):
        if r.random() < 0.1:
            frames.append(FrameRecord.invalid(i))
            continue
        pose = base + r.normal(scale=0.02, size=72)
        if r.random() < 0.1:
            pose = pose + r.normal(scale=0.5, size=72)
        frames.append(rec(i, pose, r.normal(scale=0.1, size=10), 1 + 0.01 * r.normal(),
                          r.normal(scale=0.05, size=3) + [0, 0.01 * i, 0],
                          [0.01 * i, 0, 2.5] + r.normal(scale=0.01, size=3)))
    return frames


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 90), st.data())
def test_batch_split_is_invisible(seed, n, data):
    frames = noisy_sequence(seed, n)
    if not any(f.valid for f in frames):
        return
    mode = data.draw(st.sampled_from(MODES))
    cut = data.draw(st.integers(0, n))
    cfg = StabilizerConfig(warmup=8)
    whole = run_stabilizer(frames, cfg, mode)
    stab = Stabilizer(cfg, mode)
    split = stab.push(frames[:cut]) + stab.push(frames[cut:]) + stab.flush()
    assert dump(split) == dump(whole)
    assert [f.index for f in whole] == list(range(n))


def test_geodesic_rotation_outlier_flag():
    cfg = StabilizerConfig(geodesic_rotation_outliers=True, tau_r=0.5)
    # 2*pi - 0.1 apart in axis-angle coordinates, 0.1 apart on the sphere
    frames = [rec(0, rot=(np.pi - 0.05, 0, 0)), rec(1, rot=(-(np.pi - 0.05), 0, 0))]
    stab = Stabilizer(cfg, mode="outlier_only")
    out = stab.push(frames) + stab.flush()
    assert not any(stab.rejections["r"])
    assert geodesic_distance(out[1].rotation, frames[1].rotation) < 1e-9
