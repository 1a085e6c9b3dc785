"""Synthetic fixtures shared by the test modules."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from hoikit.contact import compute_contact_maps
from hoikit.framepair import MaskSequence
from hoikit.geom import (Affine2, BinaryMask, PointCloud, icosphere, sample_surface, warp_mask,
                         write_obj, write_pgm, write_xyz)
from hoikit.hand import HandParams, pose_hand, rodrigues
from hoikit.refine import Scene

# ---------------------------------------------------------------- acceptance report

ACCEPTANCE_LINES: list = []  # (criterion number, text), printed in the terminal summary


def record_criterion(number: int, ok: bool, text: str) -> bool:
    line = f"ACCEPTANCE {number} {'PASS' if ok else 'FAIL'}: {text}"
    ACCEPTANCE_LINES.append((number, line))
    print(line)
    return ok


# ---------------------------------------------------------------- clips

W, H = 160, 120
OBJ_CENTER = (80.0, 60.0)


def _ellipse(cx, cy, rx, ry, w=W, h=H):
    ys, xs = np.mgrid[0:h, 0:w]
    return BinaryMask(((xs - cx) / rx) ** 2 + ((ys - cy) / ry) ** 2 <= 1.0)


def reference_object():
    # an asymmetric blob so rotation is visible in the mask
    a = _ellipse(80, 60, 30, 14).bits | _ellipse(100, 52, 9, 9).bits
    return BinaryMask(a)


def rotating_clip(n_before=3, n_inter=8, n_after=2, deg_per_frame=2.0, seed=0,
                  noise=0.15, outliers=0.1, n_corr=80):
    """Object rotating about its centre while a disc-shaped hand overlaps it.

    Returns (sequence, true angles per frame).
    """
    rng = np.random.default_rng(seed)
    ref = reference_object()
    ys, xs = np.nonzero(ref.bits)
    hands, objs, corr, angles = [], [], {}, []
    n = n_before + n_inter + n_after
    for t in range(n):
        k = min(max(t - n_before + 1, 0), n_inter)
        ang = deg_per_frame * k
        a = Affine2.from_rotation(ang, center=OBJ_CENTER)
        objs.append(warp_mask(ref, a))
        angles.append(ang)
        if n_before <= t < n_before + n_inter:
            hands.append(_ellipse(80, 78, 12, 10))
            pick = rng.choice(len(xs), n_corr, replace=False)
            src = np.stack([xs[pick], ys[pick]], axis=1).astype(float)
            dst = a.apply(src) + rng.normal(0.0, noise, src.shape)
            bad = rng.random(n_corr) < outliers
            dst[bad] += rng.uniform(-40, 40, (int(bad.sum()), 2))
            corr[t] = (src, dst)
        else:
            hands.append(_ellipse(20, 105, 10, 8))  # far from the object
    return MaskSequence(hands, objs, corr), angles


def write_clip(directory, seq: MaskSequence):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for t, (h, o) in enumerate(zip(seq.hands, seq.objs)):
        write_pgm(d / f"hand_{t:04d}.pgm", h)
        write_pgm(d / f"obj_{t:04d}.pgm", o)
    recs = [{"frame": t, "src": s.tolist(), "dst": e.tolist()}
            for t, (s, e) in sorted(seq.correspondences.items())]
    (d / "correspondences.json").write_text(json.dumps(recs))
    return d


# ---------------------------------------------------------------- refinement scenes

def sphere_scene(template, rng, n_points=3000, subdivisions=3):
    """A sphere resting just above the palm of a flat hand, randomly moved rigidly.

    Returns (scene, ground-truth params). Contact maps come from the ground truth.
    """
    r = rng.uniform(15, 30)
    c = np.array([rng.uniform(-20, 20), rng.uniform(15, 60), 12.0 + r + 0.3])
    mesh = icosphere(r, subdivisions, c)
    pts = sample_surface(mesh, n_points, rng)
    gt = HandParams()
    verts = pose_hand(template, gt).vertices
    c_o, c_h = compute_contact_maps(pts, verts)
    scene = Scene(mesh, pts, c_h, c_o)
    rot = rodrigues(rng.normal(size=3))
    trans = rng.normal(0.0, 50.0, 3)
    scene = scene.transformed(rot, trans)
    gt_moved = HandParams(global_rot=_compose_rot(rot), trans=trans, pose=gt.pose, shape=gt.shape)
    return scene, gt_moved


def _compose_rot(rot):
    from scipy.spatial.transform import Rotation
    return Rotation.from_matrix(rot).as_rotvec()


def perturb(params: HandParams, rng, lo=10.0, hi=30.0, pose_sigma=0.2) -> HandParams:
    d = rng.normal(size=3)
    d *= rng.uniform(lo, hi) / np.linalg.norm(d)
    return HandParams(params.global_rot, params.trans + d,
                      params.pose + rng.normal(0.0, pose_sigma, params.pose.shape), params.shape)


# ---------------------------------------------------------------- CLI samples

def write_samples(directory, n=10, seed=0, pred_equals_gt=False, template=None):
    """Sphere objects near a hand with perturbed predictions; returns the manifest path."""
    from hoikit.hand import default_template

    template = template or default_template()
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    lines = []
    for i in range(n):
        r = rng.uniform(15, 28)
        c = np.array([rng.uniform(-20, 20), rng.uniform(15, 60), 12.0 + r - rng.uniform(0.0, 3.0)])
        mesh = icosphere(r, 2, c)
        write_obj(d / f"obj{i}.obj", mesh)
        gt = HandParams(pose=rng.normal(0.0, 0.05, (15, 3)))
        gt.save(d / f"gt{i}.json")
        pred = gt if pred_equals_gt else HandParams(
            gt.global_rot + rng.normal(0.0, 0.03, 3), gt.trans + rng.normal(0.0, 3.0, 3),
            gt.pose + rng.normal(0.0, 0.1, (15, 3)), gt.shape)
        pred.save(d / f"pred{i}.json")
        rec = {"id": f"s{i:02d}", "object_mesh": f"obj{i}.obj", "gt_params": f"gt{i}.json",
               "pred_params": f"pred{i}.json", "action": "hold", "scale": 1.0}
        if i % 2:
            write_xyz(d / f"pts{i}.xyz", sample_surface(mesh, 1500, rng))
            rec["object_points"] = f"pts{i}.xyz"
        else:
            rec["sampling"] = {"n": 1500, "seed": 100 + i}
        lines.append(json.dumps(rec))
    m = d / "manifest.jsonl"
    m.write_text("\n".join(lines) + "\n")
    return m


# ---------------------------------------------------------------- contact oracle

def brute_contact_maps(obj, hand, alpha=0.1, beta=0.5, eps=5.0, gamma=2.0, k=8):
    """Straight-line four-stage contact maps with exhaustive distance matrices."""
    o = np.asarray(obj, dtype=float)
    h = np.asarray(hand, dtype=float)

    def dist(a, b):
        diff = a[:, None, :] - b[None, :, :]
        return np.sqrt(np.sum(diff * diff, axis=-1))

    d_ho = dist(h, o)
    nn_h = np.argmin(d_ho, axis=1)  # first index on ties
    nn_o = np.argmin(d_ho.T, axis=1)
    d_h = d_ho[np.arange(len(h)), nn_h]
    d_o = d_ho.T[np.arange(len(o)), nn_o]
    vote_o = np.array([np.sum(nn_h == i) for i in range(len(o))])
    vote_h = np.array([np.sum(nn_o == j) for j in range(len(h))])

    def side(p, vote, d):
        cand = vote >= np.quantile(vote.astype(float), 1 - alpha)
        thr = min(np.quantile(d[cand], beta), eps)
        core = cand & (d < thr)
        if not core.any():
            return np.zeros(len(p), bool)
        if len(p) < 2:
            dbar = 0.0
        else:
            kk = min(k, len(p) - 1)
            self_d = np.sort(dist(p, p), axis=1)[:, 1:kk + 1]
            dbar = float(np.mean(np.mean(self_d, axis=1)))
        to_core = dist(p, p[core]).min(axis=1)
        return to_core <= gamma * dbar

    return side(o, vote_o, d_o), side(h, vote_h, d_h)


def random_contact_scene(rng, max_points=1000):
    """Two overlapping, randomly scaled point blobs of up to ``max_points`` each."""
    n_o = int(rng.integers(20, max_points + 1))
    n_h = int(rng.integers(20, max_points + 1))
    kind = rng.integers(3)
    if kind == 0:  # interpenetrating spheres
        o = rng.normal(size=(n_o, 3))
        o = 20 * o / np.linalg.norm(o, axis=1, keepdims=True)
        hh = rng.normal(size=(n_h, 3))
        hh = 15 * hh / np.linalg.norm(hh, axis=1, keepdims=True) + [rng.uniform(15, 40), 0, 0]
    elif kind == 1:  # slab under a blob
        o = np.column_stack([rng.uniform(-40, 40, (n_o, 2)), rng.normal(0, 0.5, n_o)])
        hh = rng.normal(0, 10, (n_h, 3)) + [0, 0, rng.uniform(5, 20)]
    else:  # integer lattice points: many exact distance ties
        o = rng.integers(-6, 7, (n_o, 3)).astype(float)
        hh = rng.integers(-6, 7, (n_h, 3)).astype(float) + [rng.integers(0, 8), 0, 0]
    return o, hh
