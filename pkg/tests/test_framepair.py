import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import W, H, _ellipse, reference_object, rotating_clip, write_clip
from hoikit.framepair import (CASE_CONSTRAINED, CASE_MIN_ANGLE, CASE_STABLE, FramePairError,
                              MaskSequence, SelectionThresholds, detect_interaction_period,
                              frame_pose_signals, iou_gradient, load_clip, make_inpaint_mask,
                              process_clip, select_hoi_frame, select_reference_frame)
from hoikit.geom import Affine2, BinaryMask, mask_iou, warp_mask


def _blocks_clip(n, on):
    """Object fixed; the hand overlaps it on the frames in ``on`` and sits far away otherwise."""
    obj = reference_object()
    near, far = _ellipse(80, 70, 10, 8), _ellipse(15, 110, 6, 5)
    return MaskSequence([near if t in on else far for t in range(n)], [obj] * n)


# ---------------------------------------------------------------- period / reference

def test_period_examples():
    assert detect_interaction_period(_blocks_clip(10, set(range(3, 8)))) == (3, 7)
    on = set(range(2, 5)) | set(range(8, 16))
    assert detect_interaction_period(_blocks_clip(18, on)) == (8, 15)
    # equal lengths: earliest run wins
    assert detect_interaction_period(_blocks_clip(12, {1, 2, 6, 7})) == (1, 2)


def test_period_none_detected():
    with pytest.raises(FramePairError, match="no interaction detected"):
        detect_interaction_period(_blocks_clip(6, set()))


def test_period_touching_within_dilation():
    # masks 6 px apart overlap once both are dilated by 5 px
    obj = BinaryMask(np.pad(np.ones((10, 10), bool), ((10, 20), (10, 30))))
    hand = BinaryMask(np.roll(obj.bits, 16, axis=1))
    seq = MaskSequence([hand] * 3, [obj] * 3)
    assert detect_interaction_period(seq) == (0, 2)
    with pytest.raises(FramePairError):
        detect_interaction_period(seq, SelectionThresholds(dilation_px=2))


def test_reference_frame_nearest_and_earlier_tie():
    seq = _blocks_clip(10, set(range(3, 7)))
    assert select_reference_frame(seq, (3, 6)) == 2
    seq = _blocks_clip(10, set(range(0, 7)))
    assert select_reference_frame(seq, (0, 6)) == 7
    with pytest.raises(FramePairError, match="no object-only reference frame"):
        select_reference_frame(_blocks_clip(4, {0, 1, 2, 3}), (0, 3))


# ---------------------------------------------------------------- selection rule

def test_rule_traces():
    assert select_hoi_frame([3, 2, 6], [0.5, 0.1, 0.9]) == (1, CASE_MIN_ANGLE)
    assert select_hoi_frame([0.2, 0.5, 0.3], [0.90, 0.98, 0.97]) == (2, CASE_STABLE)
    assert select_hoi_frame([0.5, 8, 0.9], [0.5, 0.9, 0.6]) == (0, CASE_CONSTRAINED)


def test_iou_gradient():
    assert np.allclose(iou_gradient([0.90, 0.98, 0.97]), [0.08, 0.08, -0.01])
    assert iou_gradient([0.5]).tolist() == [0.0]


def test_rule_static_object_picks_imax_earliest():
    assert select_hoi_frame([0.0] * 5, [1.0] * 5) == (0, CASE_STABLE)
    # frame 2 is the IoU peak but still rising (+0.05); frame 3 is the nearest stable one
    assert select_hoi_frame([0.0] * 5, [0.9, 0.95, 1.0, 1.0, 1.0]) == (3, CASE_STABLE)


def test_rule_empty_stable_falls_back():
    theta, iou = [0.3, 0.1, 0.4], [0.1, 0.5, 0.9]
    assert select_hoi_frame(theta, iou) == (1, CASE_MIN_ANGLE)


def test_rule_invalid_frames_excluded():
    assert select_hoi_frame([np.nan, 3, 2], [np.nan, 0.5, 0.5], valid=[False, True, True]) == \
        (2, CASE_MIN_ANGLE)
    with pytest.raises(FramePairError):
        select_hoi_frame([1.0], [1.0], valid=[False])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.floats(-30, 30), st.floats(0, 1), st.booleans()), min_size=1, max_size=12))
def test_rule_properties(rows):
    theta, iou, valid = (list(x) for x in zip(*rows))
    if not any(valid):
        with pytest.raises(FramePairError):
            select_hoi_frame(theta, iou, valid=valid)
        return
    k, case = select_hoi_frame(theta, iou, valid=valid)
    assert valid[k]
    assert (k, case) == select_hoi_frame(theta, iou, valid=valid)
    ab = [abs(t) for t, v in zip(theta, valid) if v]
    if case == CASE_MIN_ANGLE:
        assert abs(theta[k]) == min(ab)
    if case == CASE_CONSTRAINED:
        assert abs(theta[k]) < 1.0


def test_thresholds_validation_and_json():
    with pytest.raises(ValueError):
        SelectionThresholds(dt_iou_thres=0)
    doc = SelectionThresholds().to_json()
    assert doc["max_min_angle"] == 1.0 and doc["min_max_angle"] == 5.0


# ---------------------------------------------------------------- signals and whole clips

def test_identity_frame_signal():
    seq, _ = rotating_clip(deg_per_frame=0.0, noise=0.0, outliers=0.0)
    sig = frame_pose_signals(seq, 0, (3, 10))
    assert all(sig.valid)
    assert np.allclose(sig.theta, 0.0, atol=1e-9)
    assert np.allclose(sig.iou, 1.0)


def test_static_clip():
    seq, _ = rotating_clip(deg_per_frame=0.0)
    res = process_clip(seq)
    assert res.period == (3, 10) and res.i_ref == 2
    assert np.all(np.abs(res.signals.theta) < 0.5)
    assert min(res.signals.iou) >= 0.95
    assert res.case_taken == CASE_STABLE and res.i_hoi == 3


def test_rotating_clip_recovers_angles():
    seq, angles = rotating_clip(deg_per_frame=2.0)
    res = process_clip(seq)
    truth = [angles[t] for t in res.signals.frames]
    assert truth[:3] == [2.0, 4.0, 6.0]
    assert np.max(np.abs(np.array(res.signals.theta) - truth)) < 0.5
    # every |theta| >= 2 > 1: the smallest rotation is taken
    assert res.case_taken == CASE_MIN_ANGLE and res.i_hoi == 3
    assert res.inpaint_mask.bits.shape == (H, W)
    assert mask_iou(res.inpaint_mask, seq.objs[3]) > 0.9


def test_missing_correspondences_flag_frame():
    seq, _ = rotating_clip(deg_per_frame=0.0)
    corr = dict(seq.correspondences)
    del corr[3]
    corr[4] = (corr[4][0][:2], corr[4][1][:2])  # too few points for an affine
    res = process_clip(MaskSequence(seq.hands, seq.objs, corr))
    assert res.signals.valid[:2] == [False, False]
    assert res.i_hoi == 5
    assert res.to_json()["signals"]["theta"][:2] == [None, None]


def test_inpaint_mask_is_warped_reference():
    ref = reference_object()
    a = Affine2.from_rotation(10.0, center=(80, 60))
    assert make_inpaint_mask(ref, a) == warp_mask(ref, a)


def test_sequence_validation():
    obj = reference_object()
    with pytest.raises(ValueError):
        MaskSequence([obj], [obj, obj])
    with pytest.raises(ValueError):
        MaskSequence([obj], [BinaryMask(np.zeros((5, 5), bool))])


def test_load_clip_roundtrip(tmp_path):
    seq, _ = rotating_clip()
    d = write_clip(tmp_path / "clip", seq)
    back = load_clip(d)
    assert len(back) == len(seq)
    assert all(a == b for a, b in zip(back.hands, seq.hands))
    assert sorted(back.correspondences) == sorted(seq.correspondences)
    assert process_clip(back).to_json() == process_clip(seq).to_json()


def test_load_clip_offset_numbering(tmp_path):
    seq, _ = rotating_clip()
    d = write_clip(tmp_path / "clip", seq)
    for p in sorted(d.glob("*_*.pgm"), reverse=True):
        kind, num = p.stem.split("_")
        p.rename(d / f"{kind}_{int(num) + 100:04d}.pgm")
    recs = json.loads((d / "correspondences.json").read_text())
    for r in recs:
        r["frame"] += 100
    (d / "correspondences.json").write_text(json.dumps(recs))
    assert process_clip(load_clip(d)).to_json() == process_clip(seq).to_json()


def test_load_clip_errors(tmp_path):
    with pytest.raises(FramePairError):
        load_clip(tmp_path)
    seq, _ = rotating_clip()
    d = write_clip(tmp_path / "c", seq)
    (d / "obj_0004.pgm").unlink()
    with pytest.raises(FramePairError, match="missing"):
        load_clip(d)
