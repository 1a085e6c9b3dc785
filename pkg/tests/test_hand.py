import itertools
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from hoikit.hand import (N_JOINTS, PART_TO_CATEGORY, ContactLabel7, HandParams, HandTemplate,
                         PartLabel17, TemplateConfig, balance_resample, contact_label7,
                         default_template, generate_capsule_hand_template, part_to_category,
                         pose_hand, rodrigues)
from hoikit.refine import loss_self_penetration


@pytest.fixture(scope="module")
def tpl():
    return default_template()


# ---------------------------------------------------------------- template

def test_template_invariants(tpl):
    assert tpl.n_vertices > 500
    assert len(np.unique(tpl.part_label)) == 17
    assert np.allclose(tpl.weights.sum(axis=1), 1.0, atol=1e-6)
    assert (tpl.weights >= 0).all()
    assert tpl.mesh.is_watertight
    assert tpl.joints0.shape == (N_JOINTS, 3)
    assert tpl.parent[0] < 0 and all(tpl.parent[j] < j for j in range(1, N_JOINTS))


def test_template_deterministic_across_seeds():
    a = generate_capsule_hand_template(TemplateConfig(seed=0))
    b = generate_capsule_hand_template(TemplateConfig(seed=7))
    assert np.array_equal(a.mesh.vertices, b.mesh.vertices)
    assert np.array_equal(a.weights, b.weights)
    assert np.array_equal(a.part_label, b.part_label)


def test_template_json_roundtrip(tpl, tmp_path):
    tpl.save(tmp_path / "t.json")
    back = HandTemplate.load(tmp_path / "t.json")
    assert np.array_equal(back.mesh.vertices, tpl.mesh.vertices)
    assert np.array_equal(back.mesh.faces, tpl.mesh.faces)
    assert np.array_equal(back.weights, tpl.weights)
    assert np.array_equal(back.part_label, tpl.part_label)
    assert np.array_equal(back.parent, tpl.parent)


def test_canonical_hand_has_no_self_penetration(tpl):
    # regression value frozen from the generated template
    assert loss_self_penetration(pose_hand(tpl, HandParams()), tpl) == 0.0


def test_palm_and_back_split_by_normal(tpl):
    v = tpl.mesh.vertices
    palm = tpl.part_label == PartLabel17.PALM
    back = tpl.part_label == PartLabel17.BACK
    # palmar side faces +z in the canonical frame
    assert v[palm, 2].mean() > v[back, 2].mean()


# ---------------------------------------------------------------- part aggregation

def test_aggregation_map_total_and_surjective():
    cats = [part_to_category(p) for p in range(17)]
    assert set(cats) == set(range(7))
    assert np.array_equal(PART_TO_CATEGORY, cats)
    assert part_to_category(PartLabel17.PALM) == 5
    assert part_to_category(PartLabel17.BACK) == 6


def test_contact_label7_examples(tpl):
    lab = tpl.part_label
    assert str(contact_label7(np.zeros(len(lab), bool), lab)) == "0000000"
    thumb_pad = lab == PartLabel17.THUMB_PAD
    assert str(contact_label7(thumb_pad, lab)) == "1000000"
    c = (lab == PartLabel17.PALM) | (lab == PartLabel17.INDEX_NAIL)
    assert str(contact_label7(c, lab)) == "0100010"


def test_contact_label7_min_hits():
    lab = np.array([PartLabel17.MIDDLE_PAD] * 3 + [PartLabel17.RING_KNUCKLE] * 2)
    c = np.ones(5, bool)
    assert str(contact_label7(c, lab, min_hits=3)) == "0010000"
    assert str(contact_label7(c, lab, min_hits=2)) == "0010001"


def test_contact_label7_string_roundtrip():
    lab = ContactLabel7.from_str("0101010")
    assert str(lab) == "0101010"
    with pytest.raises(ValueError):
        ContactLabel7.from_str("0102010")


# ---------------------------------------------------------------- resampling

def test_balance_resample_examples():
    assert balance_resample(["0000001"] * 5, seed=0) == [0, 1, 2, 3, 4]
    labels = ["1000000"] * 8 + ["0100000"] * 2
    out = balance_resample(labels, seed=1)
    assert len(out) == 16
    assert Counter(labels[i] for i in out) == {"1000000": 8, "0100000": 8}
    labels = ["a"] * 5 + ["b"] * 5 + ["c"] * 5
    assert balance_resample(labels, 3) == list(range(15))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.sampled_from(["1000000", "0100010", "0000001", "0011000"]), min_size=1, max_size=40),
       st.integers(0, 1000))
def test_balance_resample_property(labels, seed):
    out = balance_resample(labels, seed)
    counts = Counter(labels[i] for i in out)
    assert len(set(counts.values())) == 1
    assert set(out) == set(range(len(labels)))
    assert out == balance_resample(labels, seed)


# ---------------------------------------------------------------- posing

def test_zero_pose_exact(tpl):
    ph = pose_hand(tpl, HandParams())
    assert np.array_equal(ph.vertices, tpl.mesh.vertices)
    assert np.array_equal(ph.joints, tpl.joints0)


def test_pure_translation(tpl):
    ph = pose_hand(tpl, HandParams(trans=[10, 0, 0]))
    assert np.allclose(ph.vertices - tpl.mesh.vertices, [10, 0, 0], atol=1e-12)


def test_global_rotation_90_about_z(tpl):
    ph = pose_hand(tpl, HandParams(global_rot=[0, 0, np.pi / 2]))
    r = Rotation.from_euler("z", 90, degrees=True).as_matrix()
    assert np.abs(ph.vertices - tpl.mesh.vertices @ r.T).max() < 1e-6


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_rigid_params_are_rigid(seed):
    tpl = default_template()
    rng = np.random.default_rng(seed)
    p = HandParams(global_rot=rng.normal(size=3), trans=rng.normal(0, 30, 3))
    ph = pose_hand(tpl, p)
    r = rodrigues(p.global_rot)
    assert np.abs(ph.vertices - (tpl.mesh.vertices @ r.T + p.trans)).max() < 1e-9


def test_bone_pose_leaves_unweighted_vertices(tpl):
    # rotating the thumb chain cannot move vertices without weight on thumb bones
    pose = np.zeros((15, 3))
    pose[0] = [0.4, -0.2, 0.3]
    pose[1] = [0.5, 0, 0]
    ph = pose_hand(tpl, HandParams(pose=pose))
    thumb_bones = [1, 2, 3]
    free = tpl.weights[:, thumb_bones].sum(axis=1) == 0
    assert free.sum() > 100
    assert np.abs(ph.vertices[free] - tpl.mesh.vertices[free]).max() < 1e-9
    assert np.abs(ph.vertices[~free] - tpl.mesh.vertices[~free]).max() > 1.0


def test_uniform_shape_scales_joint_distances(tpl):
    s = 1.3
    ph = pose_hand(tpl, HandParams(shape=[s, 1, 1, 1, 1, 1]))
    for i, j in itertools.combinations(range(N_JOINTS), 2):
        d0 = np.linalg.norm(tpl.joints0[i] - tpl.joints0[j])
        assert np.linalg.norm(ph.joints[i] - ph.joints[j]) == pytest.approx(s * d0, rel=1e-12)


def test_finger_flexion_curls_toward_palm(tpl):
    pose = np.zeros((15, 3))
    pose[3:6] = [1.0, 0, 0]  # index MCP, PIP, DIP flex
    ph = pose_hand(tpl, HandParams(pose=pose))
    tip = ph.joints[8]
    assert tip[2] > tpl.joints0[8, 2] + 20  # moved toward +z (palmar side)


def test_params_validation_and_json(tmp_path):
    with pytest.raises(ValueError):
        HandParams(shape=[3, 1, 1, 1, 1, 1])
    with pytest.raises(ValueError):
        HandParams(trans=[np.inf, 0, 0])
    p = HandParams(trans=[1, 2, 3], pose=np.full((15, 3), 0.1))
    p.save(tmp_path / "p.json")
    q = HandParams.load(tmp_path / "p.json")
    assert np.array_equal(q.pose, p.pose) and np.array_equal(q.trans, p.trans)


def test_rodrigues_small_angle_and_orthonormal():
    assert np.array_equal(rodrigues(np.zeros(3)), np.eye(3))
    rng = np.random.default_rng(0)
    for aa in np.vstack([rng.normal(size=(10, 3)), rng.normal(size=(10, 3)) * 1e-6]):
        r = rodrigues(aa)
        assert np.allclose(r @ r.T, np.eye(3), atol=1e-12)
        assert np.allclose(r, Rotation.from_rotvec(aa).as_matrix(), atol=1e-12)
    tiny = np.array([1e-10, -2e-10, 3e-10])
    assert np.allclose(rodrigues(tiny), Rotation.from_rotvec(tiny).as_matrix(), atol=1e-15)
