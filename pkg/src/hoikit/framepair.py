"""Selection of an object-only / interaction frame pair from a masked video clip.

Input is a sequence of hand and object masks plus, for frames inside the
interaction, 2D correspondences from the reference frame's object to the
frame's object. The output is a reference frame, an interaction frame whose
object pose changed least w.r.t. the reference, the affine between them and
the warped reference mask used for inpainting.
"""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .geom import (Affine2, BinaryMask, GeometryError, dilate, estimate_affine_ransac, mask_iou,
                   read_pgm, rotation_angle_from_affine, warp_mask)

CASE_MIN_ANGLE = "min-angle"
CASE_STABLE = "stable-near-max"
CASE_CONSTRAINED = "constrained-near-max"

CORRESPONDENCE_FILE = "correspondences.json"


class FramePairError(ValueError):
    pass


@dataclass(frozen=True)
class SelectionThresholds:
    max_min_angle: float = 1.0  # degrees
    min_max_angle: float = 5.0  # degrees
    dt_iou_thres: float = 0.02  # per frame
    dilation_px: int = 5
    period_iou_thres: float = 0.01
    ransac_iterations: int = 1000
    ransac_tol: float = 3.0  # px

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not v > 0:
                raise ValueError(f"{k} must be positive")

    def to_json(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class MaskSequence:
    hands: tuple
    objs: tuple
    correspondences: dict = field(default_factory=dict)  # frame -> (src (n,2), dst (n,2))

    def __post_init__(self):
        object.__setattr__(self, "hands", tuple(self.hands))
        object.__setattr__(self, "objs", tuple(self.objs))
        if len(self.hands) != len(self.objs):
            raise FramePairError("hand and object mask counts differ")
        if not self.hands:
            raise FramePairError("empty mask sequence")
        dims = {m.bits.shape for m in self.hands + self.objs}
        if len(dims) != 1:
            raise FramePairError("masks do not share dimensions")
        corr = {}
        for t, (src, dst) in self.correspondences.items():
            src = np.asarray(src, dtype=float).reshape(-1, 2)
            dst = np.asarray(dst, dtype=float).reshape(-1, 2)
            if len(src) != len(dst):
                raise FramePairError(f"frame {t}: correspondence lists are not paired")
            corr[int(t)] = (src, dst)
        object.__setattr__(self, "correspondences", corr)

    def __len__(self):
        return len(self.hands)


@dataclass(frozen=True, eq=False)
class PoseSignals:
    frames: list  # absolute frame indices
    theta: list  # degrees, nan when invalid
    iou: list
    valid: list
    affines: list  # Affine2 or None


@dataclass(frozen=True, eq=False)
class FramePairResult:
    i_ref: int
    i_hoi: int
    theta: float
    affine: Affine2
    inpaint_mask: BinaryMask
    case_taken: str
    period: tuple
    signals: PoseSignals | None = None

    def to_json(self) -> dict:
        doc = {
            "i_ref": self.i_ref,
            "i_hoi": self.i_hoi,
            "theta": self.theta,
            "affine": self.affine.matrix.tolist(),
            "case_taken": self.case_taken,
            "period": list(self.period),
            "inpaint_pixels": self.inpaint_mask.count(),
        }
        if self.signals is not None:
            s = self.signals
            doc["signals"] = {
                "frames": list(s.frames),
                "theta": [None if not v else float(x) for x, v in zip(s.theta, s.valid)],
                "iou": [None if not v else float(x) for x, v in zip(s.iou, s.valid)],
                "valid": list(s.valid),
            }
        return doc


def _pair_iou(seq: MaskSequence, t: int, radius: int) -> float:
    h, o = seq.hands[t], seq.objs[t]
    if h.count() == 0 or o.count() == 0:
        return 0.0
    return mask_iou(dilate(h, radius), dilate(o, radius))


def interaction_ious(seq: MaskSequence, th: SelectionThresholds | None = None) -> np.ndarray:
    th = th or SelectionThresholds()
    return np.array([_pair_iou(seq, t, th.dilation_px) for t in range(len(seq))])


def detect_interaction_period(seq: MaskSequence, th: SelectionThresholds | None = None):
    """Longest run of frames whose dilated hand/object IoU exceeds the threshold.

    Earliest run wins on equal length. Returns (i_first, i_last) inclusive.
    """
    th = th or SelectionThresholds()
    on = interaction_ious(seq, th) > th.period_iou_thres
    best, start = None, None
    for t, flag in enumerate(list(on) + [False]):
        if flag and start is None:
            start = t
        elif not flag and start is not None:
            if best is None or (t - start) > (best[1] - best[0] + 1):
                best = (start, t - 1)
            start = None
    if best is None:
        raise FramePairError("no interaction detected")
    return best


def select_reference_frame(seq: MaskSequence, period, th: SelectionThresholds | None = None) -> int:
    """Frame outside the period with no hand/object overlap, closest to it (earlier on ties)."""
    th = th or SelectionThresholds()
    first, last = period
    cand = []
    for t in range(len(seq)):
        if first <= t <= last or seq.objs[t].count() == 0:
            continue
        if _pair_iou(seq, t, th.dilation_px) == 0.0:
            gap = first - t if t < first else t - last
            cand.append((gap, t))
    if not cand:
        raise FramePairError("no object-only reference frame")
    return min(cand)[1]


def frame_pose_signals(seq: MaskSequence, i_ref: int, period, th: SelectionThresholds | None = None,
                       seed: int = 0) -> PoseSignals:
    """Per-frame rotation (degrees) and warped-mask IoU against the reference object."""
    th = th or SelectionThresholds()
    ref = seq.objs[i_ref]
    frames, theta, iou, valid, affines = [], [], [], [], []
    for t in range(period[0], period[1] + 1):
        frames.append(t)
        a = None
        if t in seq.correspondences:
            src, dst = seq.correspondences[t]
            try:
                a, _ = estimate_affine_ransac(src, dst, th.ransac_iterations, th.ransac_tol, seed + t)
            except GeometryError:
                a = None
        if a is None:
            theta.append(float("nan"))
            iou.append(float("nan"))
            valid.append(False)
        else:
            theta.append(rotation_angle_from_affine(a))
            iou.append(mask_iou(warp_mask(ref, a), seq.objs[t]))
            valid.append(True)
        affines.append(a)
    return PoseSignals(frames, theta, iou, valid, affines)


def iou_gradient(iou) -> np.ndarray:
    """Backward difference IoU[t] - IoU[t-1]; the first entry uses the forward difference."""
    x = np.asarray(iou, dtype=float)
    d = np.zeros_like(x)
    if len(x) > 1:
        d[1:] = x[1:] - x[:-1]
        d[0] = x[1] - x[0]
    return d


def _nearest(cands, target) -> int:
    # distance first, then earlier index
    return min(cands, key=lambda t: (abs(t - target), t))


def select_hoi_frame(theta, iou, th: SelectionThresholds | None = None, valid=None):
    """Apply the three-case selection rule; returns (index into the signals, case name)."""
    th = th or SelectionThresholds()
    theta = np.asarray(theta, dtype=float)
    iou = np.asarray(iou, dtype=float)
    if theta.shape != iou.shape:
        raise ValueError("theta and iou differ in length")
    valid = np.ones(len(theta), bool) if valid is None else np.asarray(valid, dtype=bool)
    idx = np.nonzero(valid)[0]
    if len(idx) == 0:
        raise FramePairError("no valid frames")
    ab = np.abs(theta[idx])
    iu = iou[idx]
    argmin_theta = int(idx[int(np.argmin(ab))])  # argmin returns the first minimum

    if ab.min() > th.max_min_angle:
        return argmin_theta, CASE_MIN_ANGLE
    i_max = int(idx[int(np.argmax(iu))])
    if ab.max() < th.min_max_angle:
        stable = idx[np.abs(iou_gradient(iu)) < th.dt_iou_thres]
        if len(stable) == 0:
            return argmin_theta, CASE_MIN_ANGLE
        return _nearest(stable.tolist(), i_max), CASE_STABLE
    small = idx[ab < th.max_min_angle]
    if len(small) == 0:
        return argmin_theta, CASE_MIN_ANGLE
    return _nearest(small.tolist(), i_max), CASE_CONSTRAINED


def make_inpaint_mask(ref_obj_mask: BinaryMask, a_hoi: Affine2) -> BinaryMask:
    return warp_mask(ref_obj_mask, a_hoi)


def process_clip(seq: MaskSequence, th: SelectionThresholds | None = None, seed: int = 0) -> FramePairResult:
    th = th or SelectionThresholds()
    period = detect_interaction_period(seq, th)
    i_ref = select_reference_frame(seq, period, th)
    sig = frame_pose_signals(seq, i_ref, period, th, seed)
    k, case = select_hoi_frame(sig.theta, sig.iou, th, sig.valid)
    a = sig.affines[k]
    return FramePairResult(i_ref=i_ref, i_hoi=sig.frames[k], theta=float(sig.theta[k]), affine=a,
                           inpaint_mask=make_inpaint_mask(seq.objs[i_ref], a), case_taken=case,
                           period=tuple(period), signals=sig)


# ---------------------------------------------------------------- clip directories

_NAME = re.compile(r"^(hand|obj)_(\d{4,})\.pgm$")


def load_clip(directory) -> MaskSequence:
    """Read hand_%04d.pgm / obj_%04d.pgm masks and optional correspondences.json."""
    directory = Path(directory)
    found = {"hand": {}, "obj": {}}
    for p in directory.iterdir():
        m = _NAME.match(p.name)
        if m:
            found[m.group(1)][int(m.group(2))] = p
    frames = sorted(found["hand"])
    if not frames:
        raise FramePairError(f"{directory}: no masks found")
    if frames != sorted(found["obj"]) or frames != list(range(frames[0], frames[0] + len(frames))):
        raise FramePairError(f"{directory}: hand/object masks are missing or not consecutive")
    base = frames[0]
    hands = [read_pgm(found["hand"][t]) for t in frames]
    objs = [read_pgm(found["obj"][t]) for t in frames]
    corr = {}
    cpath = directory / CORRESPONDENCE_FILE
    if cpath.exists():
        for rec in json.loads(cpath.read_text()):
            corr[int(rec["frame"]) - base] = (rec["src"], rec["dst"])
    return MaskSequence(hands, objs, corr)
