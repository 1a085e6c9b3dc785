"""Physical-constraint refinement of hand parameters against an object.

The refinement loss is a weighted sum of contact, penetration, anatomy,
self-penetration and cycle-consistency terms. Discrete choices (nearest
neighbours, inside flags, closest faces, close vertex pairs) are frozen per
step in an :class:`Assignment`; the continuous part is evaluated either in
numpy (reference values, finite differences) or in torch (gradients).
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch
from scipy.spatial import cKDTree

from .geom import (PointCloud, SpatialIndex, TriMesh, closest_on_mesh, closest_point_on_triangle,
                   points_inside, require_watertight)
from .hand import N_JOINTS, N_POSE, HandParams, HandTemplate, joint_scales, pose_hand

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RefineWeights:
    lambda_simple: float = 5.0  # network training only; unused at test time
    lambda_global: float = 0.1  # network training only; unused at test time
    lambda_pene: float = 100.0
    lambda_contact: float = 100.0
    lambda_cyc: float = 10.0
    lambda_self: float = 10000.0
    lambda_anatomy: float = 0.1

    def __post_init__(self):
        if any(getattr(self, f.name) < 0 for f in fields(self)):
            raise ValueError("loss weights must be nonnegative")

    def to_json(self):
        return asdict(self)


@dataclass(frozen=True)
class TtaConfig:
    iterations: int = 500
    learning_rate: float = 1e-2
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    trans_scale: float = 10.0  # mm per optimiser unit of translation
    self_margin: float = 2.0  # mm

    def __post_init__(self):
        if self.iterations < 1 or self.learning_rate <= 0:
            raise ValueError("need iterations >= 1 and learning_rate > 0")
        object.__setattr__(self, "betas", tuple(self.betas))

    def to_json(self):
        return asdict(self)


@dataclass
class LossBreakdown:
    contact: float
    pene: float
    anatomy: float
    self: float
    cyc: float
    total: float

    def to_json(self):
        return asdict(self)


class DivergedError(RuntimeError):
    def __init__(self, msg, trace):
        super().__init__(msg)
        self.trace = trace


# ---------------------------------------------------------------- joint limits

@dataclass(frozen=True)
class JointLimits:
    """Bounds on each bone's rotation expressed in its finger frame.

    Columns are flexion, twist (about the finger axis) and abduction.
    """
    lo: np.ndarray = field(default_factory=lambda: np.tile([-0.3, -0.15, -0.35], (N_POSE, 1)))
    hi: np.ndarray = field(default_factory=lambda: np.tile([1.6, 0.15, 0.35], (N_POSE, 1)))

    def __post_init__(self):
        for name in ("lo", "hi"):
            a = np.asarray(getattr(self, name), dtype=float).reshape(N_POSE, 3)
            object.__setattr__(self, name, a)


def local_pose(template: HandTemplate, pose) -> np.ndarray:
    """Axis-angle pose rotated into each finger's (flex, twist, abduction) frame."""
    pose = np.asarray(pose, dtype=float).reshape(N_POSE, 3)
    frames = np.repeat(template.finger_frames, 3, axis=0)  # bone b-1 -> finger (b-1)//3
    return np.einsum("bji,bj->bi", frames, pose)


def loss_anatomy(params: HandParams, limits: JointLimits | None = None,
                 template: HandTemplate | None = None) -> float:
    """Squared hinge on per-DOF bounds.

    Without a template the pose components are compared as given.
    """
    limits = limits or JointLimits()
    q = local_pose(template, params.pose) if template is not None else params.pose
    over = np.maximum(q - limits.hi, 0.0)
    under = np.maximum(limits.lo - q, 0.0)
    return float(np.sum(over ** 2) + np.sum(under ** 2))


# ---------------------------------------------------------------- numpy terms

def loss_contact(hand_verts, c_h, obj_index: SpatialIndex) -> float:
    """Mean distance from contact-marked hand vertices to the object cloud."""
    c_h = np.asarray(c_h, dtype=bool)
    if not c_h.any():
        return 0.0
    _, d = obj_index.query(np.asarray(hand_verts, dtype=float)[c_h])
    return float(d.mean())


def loss_penetration(hand_verts, obj: TriMesh) -> float:
    """Sum over hand vertices inside the object of their distance to its surface."""
    require_watertight(obj)
    v = np.asarray(hand_verts, dtype=float)
    inside = points_inside(obj, v)
    if not inside.any():
        return 0.0
    d, _, _ = closest_on_mesh(obj, v[inside])
    return float(d.sum())


def self_pairs(verts, template: HandTemplate, margin: float = 2.0) -> np.ndarray:
    """Vertex pairs closer than ``margin`` that are more than 3 edges apart."""
    pairs = cKDTree(verts).query_pairs(margin, output_type="ndarray")
    if len(pairs) == 0:
        return pairs.reshape(0, 2)
    pairs = np.sort(pairs, axis=1)
    key = pairs[:, 0].astype(np.int64) * template.n_vertices + pairs[:, 1]
    near = template.near_pairs_key(3)
    pos = np.clip(np.searchsorted(near, key), 0, len(near) - 1)
    far = near[pos] != key
    return pairs[far]


def loss_self_penetration(posed, template: HandTemplate, margin: float = 2.0) -> float:
    verts = posed.vertices if hasattr(posed, "vertices") else np.asarray(posed, dtype=float)
    pairs = self_pairs(verts, template, margin)
    if len(pairs) == 0:
        return 0.0
    d = np.linalg.norm(verts[pairs[:, 0]] - verts[pairs[:, 1]], axis=1)
    return float(np.sum(np.maximum(margin - d, 0.0) ** 2))


def cycle_maps(hand_pc, obj_pc):
    """Round-trip indices: hand -> object -> hand and object -> hand -> object."""
    hi, oi = SpatialIndex(hand_pc), SpatialIndex(obj_pc)
    phi, _ = oi.query(hand_pc)  # hand -> object
    psi, _ = hi.query(obj_pc)  # object -> hand
    return psi[phi], phi[psi]


def cycle_errors(hand_pc, obj_pc):
    """Per-point L1 round-trip errors for the hand and object contact sets."""
    hand_pc = np.asarray(hand_pc, dtype=float).reshape(-1, 3)
    obj_pc = np.asarray(obj_pc, dtype=float).reshape(-1, 3)
    if len(hand_pc) == 0 or len(obj_pc) == 0:
        return np.zeros(len(hand_pc)), np.zeros(len(obj_pc))
    hh, oo = cycle_maps(hand_pc, obj_pc)
    return (np.abs(hand_pc[hh] - hand_pc).sum(axis=1),
            np.abs(obj_pc[oo] - obj_pc).sum(axis=1))


def loss_cycle(hand_pc, obj_pc) -> float:
    eh, eo = cycle_errors(hand_pc, obj_pc)
    return (float(eh.mean()) if len(eh) else 0.0) + (float(eo.mean()) if len(eo) else 0.0)


# ---------------------------------------------------------------- scene

@dataclass(frozen=True, eq=False)
class Scene:
    obj_mesh: TriMesh
    obj_points: PointCloud
    c_h: np.ndarray
    c_o: np.ndarray

    def __post_init__(self):
        require_watertight(self.obj_mesh)
        object.__setattr__(self, "c_h", np.asarray(self.c_h, dtype=bool).ravel())
        object.__setattr__(self, "c_o", np.asarray(self.c_o, dtype=bool).ravel())
        if len(self.c_o) != len(self.obj_points):
            raise ValueError("object contact map length does not match the object cloud")
        object.__setattr__(self, "obj_index", SpatialIndex(self.obj_points))
        oc = self.obj_points.points[self.c_o]
        object.__setattr__(self, "obj_contact", oc)
        object.__setattr__(self, "obj_contact_index", SpatialIndex(oc) if len(oc) else None)

    def transformed(self, rot, trans) -> "Scene":
        rot = np.asarray(rot, dtype=float)
        pts = self.obj_points.points @ rot.T + np.asarray(trans, dtype=float)
        return Scene(self.obj_mesh.transformed(rot, trans), PointCloud(pts), self.c_h, self.c_o)


@dataclass
class Assignment:
    contact_idx: np.ndarray
    contact_nn: np.ndarray
    inside_idx: np.ndarray
    inside_face: np.ndarray
    inside_closest: np.ndarray
    pairs: np.ndarray
    cyc_src: np.ndarray
    cyc_dst: np.ndarray
    cyc_obj: float  # object-side round trip; constant w.r.t. the hand


def assign(verts, template: HandTemplate, scene: Scene, margin: float) -> Assignment:
    v = np.asarray(verts, dtype=float)
    if len(scene.c_h) != len(v):
        raise ValueError("hand contact map length does not match the template")
    cidx = np.nonzero(scene.c_h)[0]
    cnn = scene.obj_index.query(v[cidx])[0] if len(cidx) else np.zeros(0, dtype=np.int64)

    inside = np.nonzero(points_inside(scene.obj_mesh, v))[0]
    if len(inside):
        _, face, closest = closest_on_mesh(scene.obj_mesh, v[inside])
    else:
        face, closest = np.zeros(0, dtype=np.int64), np.zeros((0, 3))

    pairs = self_pairs(v, template, margin)

    src = dst = np.zeros(0, dtype=np.int64)
    cyc_obj = 0.0
    if len(cidx) and scene.obj_contact_index is not None:
        hc = v[cidx]
        hidx = SpatialIndex(hc)
        phi, _ = scene.obj_contact_index.query(hc)
        psi, _ = hidx.query(scene.obj_contact)
        src, dst = cidx, cidx[psi[phi]]
        oc = scene.obj_contact
        cyc_obj = float(np.abs(oc[phi[psi]] - oc).sum(axis=1).mean())
    return Assignment(cidx, cnn, inside, face, closest, pairs, src, dst, cyc_obj)


def _weighted(w: RefineWeights, contact, pene, anatomy, self_, cyc) -> LossBreakdown:
    total = (w.lambda_contact * contact + w.lambda_pene * pene + w.lambda_anatomy * anatomy
             + w.lambda_self * self_ + w.lambda_cyc * cyc)
    return LossBreakdown(contact, pene, anatomy, self_, cyc, total)


def evaluate_numpy(verts, params: HandParams, template: HandTemplate, scene: Scene,
                   asg: Assignment, w: RefineWeights, limits: JointLimits, margin: float) -> LossBreakdown:
    """Loss for posed vertices under a fixed assignment."""
    v = np.asarray(verts, dtype=float)
    o = scene.obj_points.points
    contact = 0.0
    if len(asg.contact_idx):
        contact = float(np.linalg.norm(v[asg.contact_idx] - o[asg.contact_nn], axis=1).mean())
    pene = 0.0
    if len(asg.inside_idx):
        tri = scene.obj_mesh.triangles[asg.inside_face]
        cp = closest_point_on_triangle(v[asg.inside_idx], tri[:, 0], tri[:, 1], tri[:, 2])
        pene = float(np.linalg.norm(v[asg.inside_idx] - cp, axis=1).sum())
    self_ = 0.0
    if len(asg.pairs):
        d = np.linalg.norm(v[asg.pairs[:, 0]] - v[asg.pairs[:, 1]], axis=1)
        self_ = float(np.sum(np.maximum(margin - d, 0.0) ** 2))
    cyc = asg.cyc_obj
    if len(asg.cyc_src):
        cyc += float(np.abs(v[asg.cyc_dst] - v[asg.cyc_src]).sum(axis=1).mean())
    anatomy = loss_anatomy(params, limits, template)
    return _weighted(w, contact, pene, anatomy, self_, cyc)


def total_refine_loss(template: HandTemplate, params: HandParams, scene: Scene,
                      w: RefineWeights | None = None, limits: JointLimits | None = None,
                      margin: float = 2.0) -> LossBreakdown:
    w = w or RefineWeights()
    limits = limits or JointLimits()
    verts = pose_hand(template, params).vertices
    asg = assign(verts, template, scene, margin)
    return evaluate_numpy(verts, params, template, scene, asg, w, limits, margin)


# ---------------------------------------------------------------- torch mirror

def _rodrigues_t(aa: torch.Tensor) -> torch.Tensor:
    sq = (aa * aa).sum(-1)[..., None, None]
    small = sq < 1e-16
    sq_safe = torch.where(small, torch.ones_like(sq), sq)
    theta = torch.sqrt(sq_safe)
    a = torch.where(small, 1.0 - sq / 6.0, torch.sin(theta) / theta)
    b = torch.where(small, 0.5 - sq / 24.0, (1.0 - torch.cos(theta)) / sq_safe)
    z = torch.zeros_like(aa[..., 0])
    k = torch.stack([
        torch.stack([z, -aa[..., 2], aa[..., 1]], -1),
        torch.stack([aa[..., 2], z, -aa[..., 0]], -1),
        torch.stack([-aa[..., 1], aa[..., 0], z], -1),
    ], -2)
    eye = torch.eye(3, dtype=aa.dtype).expand(k.shape)
    return eye + a * k + b * (k @ k)


def _safe_norm(d: torch.Tensor) -> torch.Tensor:
    sq = (d * d).sum(-1)
    pos = sq > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, sq, torch.ones_like(sq))), torch.zeros_like(sq))


class TorchHand:
    """Differentiable copy of :func:`hoikit.hand.pose_hand` for a fixed shape."""

    def __init__(self, template: HandTemplate, shape):
        dt = torch.float64
        self.t = template
        self.sg = float(shape[0])
        self.scale = joint_scales(template, shape)
        self.j0 = template.joints0
        self.x = torch.tensor(self.sg * template.mesh.vertices, dtype=dt)
        self.w = torch.tensor(template.weights, dtype=dt)
        bj = template.bone_joint
        self.rel = self.x[None] - torch.tensor(self.sg * self.j0[bj], dtype=dt)[:, None, :]
        self.frames = torch.tensor(np.repeat(template.finger_frames, 3, axis=0), dtype=dt)

    def vertices(self, global_rot, trans, pose):
        t = self.t
        par, jb = t.parent, t.joint_bone
        rl = _rodrigues_t(pose)
        eye = torch.eye(3, dtype=pose.dtype)
        world = [eye] + [None] * (N_JOINTS - 1)
        disp = [torch.zeros(3, dtype=pose.dtype)] + [None] * (N_JOINTS - 1)
        for j in range(1, N_JOINTS):
            p = par[j]
            off = self.j0[j] - self.j0[p]
            off_s = torch.as_tensor(self.scale[j] * off, dtype=pose.dtype)
            disp[j] = disp[p] + world[p] @ off_s - torch.as_tensor(self.sg * off, dtype=pose.dtype)
            world[j] = world[p] @ rl[jb[j] - 1] if jb[j] > 0 else world[p]
        bj = t.bone_joint
        wb = torch.stack([world[j] for j in bj]) - eye  # (16, 3, 3)
        db = torch.stack([disp[j] for j in bj])  # (16, 3)
        moved = torch.einsum("bvk,bik->bvi", self.rel, wb) + db[:, None, :]
        verts = self.x + torch.einsum("vb,bvi->vi", self.w, moved)
        rg = _rodrigues_t(global_rot)
        return verts @ rg.T + trans

    def anatomy(self, pose, limits: JointLimits):
        q = torch.einsum("bji,bj->bi", self.frames, pose)
        hi = torch.as_tensor(limits.hi, dtype=pose.dtype)
        lo = torch.as_tensor(limits.lo, dtype=pose.dtype)
        return (torch.relu(q - hi) ** 2).sum() + (torch.relu(lo - q) ** 2).sum()


def evaluate_torch(th: TorchHand, verts, pose, scene: Scene, asg: Assignment, w: RefineWeights,
                   limits: JointLimits, margin: float):
    dt = verts.dtype
    zero = torch.zeros((), dtype=dt)
    o = scene.obj_points.points
    contact = zero
    if len(asg.contact_idx):
        target = torch.as_tensor(o[asg.contact_nn], dtype=dt)
        contact = _safe_norm(verts[asg.contact_idx] - target).mean()
    pene = zero
    if len(asg.inside_idx):
        # distance to the frozen closest point has the gradient of the true distance
        cp = torch.as_tensor(asg.inside_closest, dtype=dt)
        pene = _safe_norm(verts[asg.inside_idx] - cp).sum()
    self_ = zero
    if len(asg.pairs):
        d = _safe_norm(verts[asg.pairs[:, 0]] - verts[asg.pairs[:, 1]])
        self_ = (torch.relu(margin - d) ** 2).sum()
    cyc = torch.as_tensor(asg.cyc_obj, dtype=dt)
    if len(asg.cyc_src):
        cyc = cyc + (verts[asg.cyc_dst] - verts[asg.cyc_src]).abs().sum(1).mean()
    anatomy = th.anatomy(pose, limits)
    total = (w.lambda_contact * contact + w.lambda_pene * pene + w.lambda_anatomy * anatomy
             + w.lambda_self * self_ + w.lambda_cyc * cyc)
    return total, (contact, pene, anatomy, self_, cyc)


def _unpack(x: torch.Tensor, trans_scale: float):
    return x[0:3], x[3:6] * trans_scale, x[6:].reshape(N_POSE, 3)


def _pack(params: HandParams, trans_scale: float) -> np.ndarray:
    return np.concatenate([params.global_rot, params.trans / trans_scale, params.pose.ravel()])


def _params_from(x: np.ndarray, shape, trans_scale: float) -> HandParams:
    return HandParams(x[0:3], x[3:6] * trans_scale, x[6:].reshape(N_POSE, 3), shape)


def loss_and_grad(template: HandTemplate, params: HandParams, scene: Scene,
                  w: RefineWeights | None = None, limits: JointLimits | None = None,
                  margin: float = 2.0, asg: Assignment | None = None):
    """Total loss and its gradient w.r.t. (global_rot, trans [mm], pose) as a 51-vector."""
    w = w or RefineWeights()
    limits = limits or JointLimits()
    th = TorchHand(template, params.shape)
    x = torch.tensor(_pack(params, 1.0), dtype=torch.float64, requires_grad=True)
    gr, tr, po = _unpack(x, 1.0)
    verts = th.vertices(gr, tr, po)
    if asg is None:
        asg = assign(verts.detach().numpy(), template, scene, margin)
    total, _ = evaluate_torch(th, verts, po, scene, asg, w, limits, margin)
    total.backward()
    return float(total.detach()), x.grad.numpy().copy()


def kink_distance(template: HandTemplate, params: HandParams, scene: Scene,
                  margin: float = 2.0) -> float:
    """How far (mm) the configuration is from a non-differentiable point of the loss.

    The frozen-assignment loss has kinks where an inside vertex reaches the
    surface, where a contact vertex meets its target point, and where a cycle
    difference component crosses zero; a close vertex pair reaching the margin
    only bends its (squared) hinge but is reported too. Finite-difference
    checks are only meaningful when this exceeds the finite-difference
    displacement.
    """
    v = pose_hand(template, params).vertices
    asg = assign(v, template, scene, margin)
    out = np.inf
    if len(asg.inside_idx):
        out = min(out, float(np.linalg.norm(v[asg.inside_idx] - asg.inside_closest, axis=1).min()))
    if len(asg.contact_idx):
        o = scene.obj_points.points[asg.contact_nn]
        out = min(out, float(np.linalg.norm(v[asg.contact_idx] - o, axis=1).min()))
    if len(asg.cyc_src):
        diff = np.abs(v[asg.cyc_dst] - v[asg.cyc_src])
        nz = diff[asg.cyc_dst != asg.cyc_src]
        if len(nz):
            out = min(out, float(nz.min()))
    if len(asg.pairs):
        d = np.linalg.norm(v[asg.pairs[:, 0]] - v[asg.pairs[:, 1]], axis=1)
        out = min(out, float(np.abs(margin - d).min()))
    return out


def check_gradients(template: HandTemplate, params: HandParams, scene: Scene,
                    w: RefineWeights | None = None, limits: JointLimits | None = None,
                    margin: float = 2.0, step: float = 1e-4, trans_scale: float = 10.0) -> float:
    """Max relative error of the autograd gradient against central differences.

    Both sides use the assignment of the unperturbed configuration, so the
    comparison is between two evaluations of the same piecewise-smooth branch.
    The central differences at ``step`` and ``step / 2`` are Richardson-combined
    to cancel their O(h^2) truncation error, which is otherwise visible where
    the heavily weighted self-penetration term has large higher derivatives.
    """
    w = w or RefineWeights()
    limits = limits or JointLimits()
    base = pose_hand(template, params).vertices
    asg = assign(base, template, scene, margin)
    _, g = loss_and_grad(template, params, scene, w, limits, margin, asg)
    x0 = _pack(params, 1.0)
    h = np.full(len(x0), step)
    h[3:6] = step * trans_scale

    def central(i, hi):
        vals = []
        for sgn in (1.0, -1.0):
            x = x0.copy()
            x[i] += sgn * hi
            p = _params_from(x, params.shape, 1.0)
            v = pose_hand(template, p).vertices
            vals.append(evaluate_numpy(v, p, template, scene, asg, w, limits, margin).total)
        return (vals[0] - vals[1]) / (2 * hi)

    fd = np.array([(4.0 * central(i, h[i] / 2) - central(i, h[i])) / 3.0 for i in range(len(x0))])
    floor = 1e-6 * max(1.0, float(np.max(np.abs(fd))))
    denom = np.maximum(np.maximum(np.abs(g), np.abs(fd)), floor)
    return float(np.max(np.abs(g - fd) / denom))


# ---------------------------------------------------------------- optimisation

def tta_refine(template: HandTemplate, init: HandParams, scene: Scene,
               w: RefineWeights | None = None, cfg: TtaConfig | None = None,
               limits: JointLimits | None = None):
    """Adam on (global_rot, trans, pose) with shape frozen.

    Returns the lowest-loss iterate and the loss of every iterate (the initial
    one plus one per step).
    """
    w = w or RefineWeights()
    cfg = cfg or TtaConfig()
    limits = limits or JointLimits()
    th = TorchHand(template, init.shape)
    x = torch.tensor(_pack(init, cfg.trans_scale), dtype=torch.float64, requires_grad=True)
    opt = torch.optim.Adam([x], lr=cfg.learning_rate, betas=cfg.betas, eps=cfg.adam_eps)
    trace: list[LossBreakdown] = []
    best_val, best_it, best_x = np.inf, 0, x.detach().numpy().copy()
    for it in range(cfg.iterations + 1):
        opt.zero_grad()
        gr, tr, po = _unpack(x, cfg.trans_scale)
        verts = th.vertices(gr, tr, po)
        if not torch.isfinite(verts).all():
            raise DivergedError(f"diverged at iteration {it}: non-finite vertices", trace)
        asg = assign(verts.detach().numpy(), template, scene, cfg.self_margin)
        total, terms = evaluate_torch(th, verts, po, scene, asg, w, limits, cfg.self_margin)
        val = float(total.detach())
        trace.append(LossBreakdown(*(float(t.detach()) for t in terms), val))
        if not np.isfinite(val):
            raise DivergedError(f"diverged at iteration {it}", trace)
        if val < best_val:
            best_val, best_it, best_x = val, it, x.detach().numpy().copy()
        if it == cfg.iterations:
            break
        total.backward()
        opt.step()
    log.debug("tta: %.4g -> %.4g", trace[0].total, best_val)
    if best_it == 0:
        return init.copy(), trace
    return _params_from(best_x, init.shape, cfg.trans_scale), trace
