"""Self-contained skinned hand: capsule template, FK + LBS, part labels.

Canonical frame: wrist joint at the origin, fingers along +y, palmar side
facing +z. Units are millimetres. Joint order is wrist, then per finger
(thumb, index, middle, ring, pinky) the MCP, PIP, DIP and TIP joints.
Articulated bones are the wrist plus MCP/PIP/DIP of each finger (16).
"""

from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass, field
from functools import cached_property, lru_cache
from pathlib import Path

import numpy as np
from scipy import sparse

from .geom import GeometryError, TriMesh

FINGERS = ("thumb", "index", "middle", "ring", "pinky")
N_JOINTS = 21
N_BONES = 16
N_POSE = 15


class PartLabel17(enum.IntEnum):
    THUMB_PAD = 0
    THUMB_NAIL = 1
    THUMB_KNUCKLE = 2
    INDEX_PAD = 3
    INDEX_NAIL = 4
    INDEX_KNUCKLE = 5
    MIDDLE_PAD = 6
    MIDDLE_NAIL = 7
    MIDDLE_KNUCKLE = 8
    RING_PAD = 9
    RING_NAIL = 10
    RING_KNUCKLE = 11
    PINKY_PAD = 12
    PINKY_NAIL = 13
    PINKY_KNUCKLE = 14
    PALM = 15
    BACK = 16


CATEGORIES7 = ("thumb", "index", "middle", "ring", "pinky", "palmar", "dorsal")
PALMAR, DORSAL = 5, 6


def part_to_category(part: int) -> int:
    """17 parts -> 7 contact categories (finger pad/nail -> finger; knuckles, back -> dorsal)."""
    part = int(part)
    if part == PartLabel17.PALM:
        return PALMAR
    if part == PartLabel17.BACK:
        return DORSAL
    finger, kind = divmod(part, 3)
    return DORSAL if kind == 2 else finger


PART_TO_CATEGORY = np.array([part_to_category(p) for p in range(17)])


@dataclass(frozen=True)
class ContactLabel7:
    bits: tuple[int, ...] = (0,) * 7

    def __post_init__(self):
        b = tuple(int(x) for x in self.bits)
        if len(b) != 7 or any(x not in (0, 1) for x in b):
            raise ValueError(f"invalid 7-bit label {self.bits!r}")
        object.__setattr__(self, "bits", b)

    @classmethod
    def from_str(cls, s: str):
        return cls(tuple(int(c) for c in s.strip()))

    def __str__(self):
        return "".join(str(b) for b in self.bits)

    def as_array(self):
        return np.array(self.bits, dtype=bool)


def contact_label7(hand_contact, part_label, min_hits: int = 3) -> ContactLabel7:
    c = np.asarray(hand_contact).astype(bool).ravel()
    parts = np.asarray(part_label).ravel()
    if len(c) != len(parts):
        raise ValueError("contact map and part labels differ in length")
    counts = np.bincount(PART_TO_CATEGORY[parts[c]], minlength=7)
    return ContactLabel7(tuple(int(n >= min_hits) for n in counts))


def balance_resample(labels, seed: int = 0) -> list[int]:
    """Oversample every distinct label up to the largest class size.

    All original indices are kept; extra draws come with replacement from the
    same class. The result is sorted, so an already balanced input comes back
    unchanged.
    """
    labels = [str(x) for x in labels]
    if not labels:
        raise ValueError("nothing to resample")
    rng = np.random.default_rng(seed)
    classes: dict[str, list[int]] = {}
    for i, lab in enumerate(labels):
        classes.setdefault(lab, []).append(i)
    target = max(len(v) for v in classes.values())
    out = []
    for lab in sorted(classes):
        idx = classes[lab]
        out.extend(idx)
        if len(idx) < target:
            out.extend(int(i) for i in rng.choice(idx, size=target - len(idx), replace=True))
    return sorted(out)


# ---------------------------------------------------------------- rotations

def rodrigues(aa) -> np.ndarray:
    """Axis-angle (..., 3) -> rotation matrices (..., 3, 3)."""
    aa = np.asarray(aa, dtype=float)
    theta = np.linalg.norm(aa, axis=-1)[..., None, None]
    k = np.zeros(aa.shape[:-1] + (3, 3))
    k[..., 0, 1], k[..., 0, 2] = -aa[..., 2], aa[..., 1]
    k[..., 1, 0], k[..., 1, 2] = aa[..., 2], -aa[..., 0]
    k[..., 2, 0], k[..., 2, 1] = -aa[..., 1], aa[..., 0]
    small = theta < 1e-8
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta ** 2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta ** 2 / 24.0, (1.0 - np.cos(safe)) / safe ** 2)
    eye = np.broadcast_to(np.eye(3), k.shape)
    out = eye + a * k + b * (k @ k)
    # exact identity for exact zeros
    zero = np.all(aa == 0.0, axis=-1)
    return np.where(zero[..., None, None], eye, out)


# ---------------------------------------------------------------- template

@dataclass
class FingerSpec:
    mcp: tuple[float, float, float]
    direction: tuple[float, float, float]
    palmar: tuple[float, float, float]
    lengths: tuple[float, float, float]
    radius: float


def _default_fingers():
    d = np.array([0.55, 0.835, 0.0])
    d /= np.linalg.norm(d)
    side = np.array([-d[1], d[0], 0.0])
    n = 0.4 * side + np.array([0.0, 0.0, 1.0])
    n -= n.dot(d) * d
    n /= np.linalg.norm(n)
    return [
        FingerSpec((30.0, 18.0, 0.0), tuple(d), tuple(n), (38.0, 32.0, 30.0), 9.5),
        FingerSpec((30.0, 78.0, 0.0), (0, 1, 0), (0, 0, 1), (40.0, 24.0, 21.0), 8.5),
        FingerSpec((10.0, 80.0, 0.0), (0, 1, 0), (0, 0, 1), (44.0, 27.0, 22.0), 8.5),
        FingerSpec((-10.0, 78.0, 0.0), (0, 1, 0), (0, 0, 1), (41.0, 26.0, 21.0), 8.0),
        FingerSpec((-30.0, 74.0, 0.0), (0, 1, 0), (0, 0, 1), (33.0, 19.0, 19.0), 7.5),
    ]


@dataclass
class TemplateConfig:
    palm_min: tuple[float, float, float] = (-42.0, -10.0, -12.0)
    palm_max: tuple[float, float, float] = (42.0, 85.0, 12.0)
    palm_spacing: float = 8.0
    ring_resolution: int = 8
    ring_spacing: float = 5.0
    cap_rings: int = 2
    fingers: list = field(default_factory=_default_fingers)
    weight_power: float = 2.0
    seed: int = 0
    jitter: float = 0.0


@dataclass(frozen=True, eq=False)
class HandTemplate:
    mesh: TriMesh
    joints0: np.ndarray  # (21, 3)
    parent: np.ndarray  # (21,), -1 for the wrist
    weights: np.ndarray  # (V, 16)
    part_label: np.ndarray  # (V,)
    finger_frames: np.ndarray  # (5, 3, 3) columns: flexion axis, finger axis, palmar normal

    def __post_init__(self):
        par = np.asarray(self.parent)
        if len(self.joints0) != N_JOINTS or len(par) != N_JOINTS:
            raise GeometryError("template needs 21 joints")
        roots = np.nonzero(par < 0)[0]
        if len(roots) != 1 or any(par[j] >= j for j in range(N_JOINTS) if par[j] >= 0):
            raise GeometryError("joint tree must be a single rooted tree in topological order")
        w = np.asarray(self.weights)
        if w.shape != (len(self.mesh.vertices), N_BONES):
            raise GeometryError("weights must be (V, 16)")
        if np.any(w < 0) or np.max(np.abs(w.sum(axis=1) - 1.0)) > 1e-6:
            raise GeometryError("weight rows must be nonnegative and sum to 1")
        if len(np.unique(self.part_label)) != 17:
            raise GeometryError("template must carry all 17 part labels")
        if not self.mesh.is_watertight:
            raise GeometryError("open surface")

    @property
    def n_vertices(self) -> int:
        return len(self.mesh.vertices)

    @cached_property
    def bone_joint(self) -> np.ndarray:
        """Joint index each bone rotates about."""
        return np.array([0] + [1 + 4 * f + k for f in range(5) for k in range(3)])

    @cached_property
    def joint_bone(self) -> np.ndarray:
        """Bone index for each joint, -1 for fingertips."""
        jb = -np.ones(N_JOINTS, dtype=int)
        jb[self.bone_joint] = np.arange(N_BONES)
        return jb

    @cached_property
    def adjacency(self) -> sparse.csr_matrix:
        f = self.mesh.faces
        n = self.n_vertices
        r = np.concatenate([f[:, 0], f[:, 1], f[:, 2]])
        c = np.concatenate([f[:, 1], f[:, 2], f[:, 0]])
        a = sparse.coo_matrix((np.ones(len(r)), (r, c)), shape=(n, n)).tocsr()
        return ((a + a.T) > 0).astype(np.int8)

    def near_pairs_key(self, hops: int = 3) -> np.ndarray:
        """Sorted keys i*V+j (i<j) of vertex pairs within ``hops`` graph edges."""
        return _near_pairs(self, hops)

    def to_json(self) -> dict:
        return {
            "format": "hoikit-hand-template/1",
            "vertices": self.mesh.vertices.tolist(),
            "faces": self.mesh.faces.tolist(),
            "joints": self.joints0.tolist(),
            "parents": [int(p) for p in self.parent],
            "weights": self.weights.tolist(),
            "labels": [int(x) for x in self.part_label],
            "finger_frames": self.finger_frames.tolist(),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "HandTemplate":
        return cls(
            mesh=TriMesh(doc["vertices"], doc["faces"]),
            joints0=np.asarray(doc["joints"], dtype=float),
            parent=np.asarray(doc["parents"], dtype=int),
            weights=np.asarray(doc["weights"], dtype=float),
            part_label=np.asarray(doc["labels"], dtype=int),
            finger_frames=np.asarray(doc["finger_frames"], dtype=float),
        )

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "HandTemplate":
        return cls.from_json(json.loads(Path(path).read_text()))


_PAIR_CACHE: dict = {}


def _near_pairs(t: HandTemplate, hops: int) -> np.ndarray:
    key = (id(t), hops)
    if key not in _PAIR_CACHE:
        a = t.adjacency.astype(np.int32)
        reach = sparse.identity(t.n_vertices, dtype=np.int32, format="csr")
        acc = reach.copy()
        for _ in range(hops):
            reach = ((reach @ a) > 0).astype(np.int32)
            acc = ((acc + reach) > 0).astype(np.int32)
        coo = sparse.triu(acc, k=1).tocoo()
        _PAIR_CACHE[key] = np.sort(coo.row.astype(np.int64) * t.n_vertices + coo.col)
    return _PAIR_CACHE[key]


def _orient_outward(verts, faces):
    tri = verts[faces]
    vol = np.einsum("ij,ij->i", tri[:, 0], np.cross(tri[:, 1], tri[:, 2])).sum()
    return faces if vol > 0 else faces[:, ::-1].copy()


def _palm_mesh(lo, hi, spacing):
    """Box with gridded top/bottom faces and bare side walls.

    Side walls carry no interior vertices, so finger tubes passing through them
    keep a clearance equal to the palm half-thickness minus the tube radius.
    """
    nx = max(2, int(round((hi[0] - lo[0]) / spacing)) + 1)
    ny = max(2, int(round((hi[1] - lo[1]) / spacing)) + 1)
    xs = np.linspace(lo[0], hi[0], nx)
    ys = np.linspace(lo[1], hi[1], ny)
    verts, faces = [], []

    def grid(z):
        base = len(verts)
        for y in ys:
            for x in xs:
                verts.append((x, y, z))
        return base

    bot, top = grid(lo[2]), grid(hi[2])

    def vid(base, i, j):
        return base + j * nx + i

    for base, up in ((top, True), (bot, False)):
        for j in range(ny - 1):
            for i in range(nx - 1):
                a, b = vid(base, i, j), vid(base, i + 1, j)
                c, d = vid(base, i + 1, j + 1), vid(base, i, j + 1)
                if up:
                    faces += [(a, b, c), (a, c, d)]
                else:
                    faces += [(a, c, b), (a, d, c)]
    # boundary loop counter-clockwise seen from +z
    loop = ([(i, 0) for i in range(nx - 1)] + [(nx - 1, j) for j in range(ny - 1)]
            + [(i, ny - 1) for i in range(nx - 1, 0, -1)] + [(0, j) for j in range(ny - 1, 0, -1)])
    for k in range(len(loop)):
        (i0, j0), (i1, j1) = loop[k], loop[(k + 1) % len(loop)]
        t0, t1 = vid(top, i0, j0), vid(top, i1, j1)
        b0, b1 = vid(bot, i0, j0), vid(bot, i1, j1)
        faces += [(b0, b1, t1), (b0, t1, t0)]
    v = np.asarray(verts, dtype=float)
    f = _orient_outward(v, np.asarray(faces))
    label = np.where(v[:, 2] > 0.5 * (lo[2] + hi[2]), PartLabel17.PALM, PartLabel17.BACK)
    return v, f, label


def _finger_tube(spec: FingerSpec, res: int, spacing: float, cap_rings: int):
    """Closed capsule-ended tube from the MCP joint to the fingertip.

    Returns vertices, faces, axial coordinate and radial direction per vertex.
    """
    d = np.asarray(spec.direction, dtype=float)
    n = np.asarray(spec.palmar, dtype=float)
    u = np.cross(d, n)
    r = spec.radius
    mcp = np.asarray(spec.mcp, dtype=float)
    total = float(sum(spec.lengths))
    l_cyl = total - r
    nseg = max(1, int(np.ceil(l_cyl / spacing)))
    stations = [(s, r) for s in np.linspace(0.0, l_cyl, nseg + 1)]
    caps = [np.pi / 2 * (k + 1) / (cap_rings + 1) for k in range(cap_rings)]
    back = [(-r * np.sin(p), r * np.cos(p)) for p in reversed(caps)]
    front = [(l_cyl + r * np.sin(p), r * np.cos(p)) for p in caps]
    rings = back + stations + front

    phi = 2 * np.pi * np.arange(res) / res
    dirs = np.cos(phi)[:, None] * u + np.sin(phi)[:, None] * n
    verts, axial, radial = [mcp - r * d], [-r], [np.zeros(3)]
    for s, rad in rings:
        verts.extend(mcp + s * d + rad * dirs)
        axial.extend([s] * res)
        radial.extend(dirs)
    verts.append(mcp + total * d)
    axial.append(total)
    radial.append(np.zeros(3))
    nring = len(rings)
    faces = []
    for i in range(res):
        faces.append((0, 1 + (i + 1) % res, 1 + i))
    for k in range(nring - 1):
        a0, b0 = 1 + k * res, 1 + (k + 1) * res
        for i in range(res):
            i1 = (i + 1) % res
            faces += [(a0 + i, a0 + i1, b0 + i1), (a0 + i, b0 + i1, b0 + i)]
    tip = len(verts) - 1
    last = 1 + (nring - 1) * res
    for i in range(res):
        faces.append((tip, last + i, last + (i + 1) % res))
    v = np.asarray(verts)
    f = _orient_outward(v, np.asarray(faces))
    return v, f, np.asarray(axial), np.asarray(radial)


def _segment_distance(p, a, b):
    ab = b - a
    t = np.clip(((p - a) @ ab) / max(ab @ ab, 1e-12), 0.0, 1.0)
    return np.linalg.norm(p - (a + t[:, None] * ab), axis=1)


def generate_capsule_hand_template(config: TemplateConfig | None = None) -> HandTemplate:
    cfg = config or TemplateConfig()
    if cfg.ring_resolution < 3 or cfg.ring_spacing <= 0 or cfg.palm_spacing <= 0:
        raise GeometryError("template generation failed")
    for fs in cfg.fingers:
        if fs.radius <= 0 or min(fs.lengths) <= 0 or sum(fs.lengths) <= fs.radius:
            raise GeometryError("template generation failed")

    joints = np.zeros((N_JOINTS, 3))
    parent = -np.ones(N_JOINTS, dtype=int)
    frames = np.zeros((5, 3, 3))
    for f, fs in enumerate(cfg.fingers):
        d = np.asarray(fs.direction, dtype=float)
        s = np.cumsum([0.0, *fs.lengths])
        for k in range(4):
            j = 1 + 4 * f + k
            joints[j] = np.asarray(fs.mcp) + s[k] * d
            parent[j] = 0 if k == 0 else j - 1
        n = np.asarray(fs.palmar, dtype=float)
        frames[f] = np.stack([np.cross(d, n), d, n], axis=1)

    pv, pf, plabel = _palm_mesh(np.asarray(cfg.palm_min), np.asarray(cfg.palm_max), cfg.palm_spacing)
    verts, faces, labels = [pv], [pf], [plabel]
    owner = [np.full(len(pv), -1)]
    offset = len(pv)
    for f, fs in enumerate(cfg.fingers):
        v, fc, axial, radial = _finger_tube(fs, cfg.ring_resolution, cfg.ring_spacing, cfg.cap_rings)
        l1, l2 = fs.lengths[0], fs.lengths[0] + fs.lengths[1]
        palmar = radial @ np.asarray(fs.palmar) >= 0
        lab = np.where(axial >= l2,
                       np.where(palmar, 3 * f + 0, 3 * f + 1),
                       np.where(palmar, PartLabel17.PALM, 3 * f + 2))
        verts.append(v)
        faces.append(fc + offset)
        labels.append(lab)
        owner.append(np.full(len(v), f))
        offset += len(v)
    v = np.concatenate(verts)
    fcs = np.concatenate(faces)
    labels = np.concatenate(labels).astype(int)
    owner = np.concatenate(owner)
    if cfg.jitter > 0:
        v = v + np.random.default_rng(cfg.seed).normal(scale=cfg.jitter, size=v.shape)

    # bone -> list of segments; the wrist bone fans out to every MCP
    segs = {0: [(joints[0], joints[1 + 4 * f]) for f in range(5)]}
    for f in range(5):
        for k in range(3):
            j = 1 + 4 * f + k
            segs[1 + 3 * f + k] = [(joints[j], joints[j + 1])]
    dist = np.full((len(v), N_BONES), np.inf)
    for b, ss in segs.items():
        dist[:, b] = np.min([_segment_distance(v, a, c) for a, c in ss], axis=0)
    # Finger vertices bind to their own chain + wrist; palm vertices to the
    # wrist and the MCP bones.
    allowed = np.zeros((len(v), N_BONES), dtype=bool)
    allowed[:, 0] = True
    for f in range(5):
        on = owner == f
        allowed[np.ix_(on, [1 + 3 * f, 2 + 3 * f, 3 + 3 * f])] = True
        allowed[owner == -1, 1 + 3 * f] = True
    dist = np.where(allowed, dist, np.inf)
    order = np.argsort(dist, axis=1, kind="stable")[:, :2]
    rows = np.arange(len(v))[:, None]
    near = np.maximum(dist[rows, order], 1e-6)
    w_near = near ** -cfg.weight_power
    w_near /= w_near.sum(axis=1, keepdims=True)
    weights = np.zeros((len(v), N_BONES))
    weights[rows, order] = w_near

    mesh = TriMesh(v, fcs)
    if not mesh.is_watertight:
        raise GeometryError("template generation failed")
    try:
        return HandTemplate(mesh, joints, parent, weights, labels, frames)
    except GeometryError as exc:
        raise GeometryError("template generation failed") from exc


@lru_cache(maxsize=1)
def default_template() -> HandTemplate:
    return generate_capsule_hand_template()


# ---------------------------------------------------------------- posing

@dataclass
class HandParams:
    global_rot: np.ndarray = field(default_factory=lambda: np.zeros(3))
    trans: np.ndarray = field(default_factory=lambda: np.zeros(3))
    pose: np.ndarray = field(default_factory=lambda: np.zeros((N_POSE, 3)))
    shape: np.ndarray = field(default_factory=lambda: np.ones(6))

    def __post_init__(self):
        self.global_rot = np.asarray(self.global_rot, dtype=float).reshape(3)
        self.trans = np.asarray(self.trans, dtype=float).reshape(3)
        self.pose = np.asarray(self.pose, dtype=float).reshape(N_POSE, 3)
        self.shape = np.asarray(self.shape, dtype=float).reshape(6)
        for v in (self.global_rot, self.trans, self.pose, self.shape):
            if not np.all(np.isfinite(v)):
                raise ValueError("hand parameters must be finite")
        if np.any(self.shape < 0.5) or np.any(self.shape > 2.0):
            raise ValueError("shape scales must lie in [0.5, 2.0]")

    def copy(self) -> "HandParams":
        return HandParams(self.global_rot.copy(), self.trans.copy(), self.pose.copy(), self.shape.copy())

    def to_json(self) -> dict:
        return {k: np.asarray(v).tolist() for k, v in asdict(self).items()}

    @classmethod
    def from_json(cls, doc: dict) -> "HandParams":
        return cls(**{k: doc[k] for k in ("global_rot", "trans", "pose", "shape") if k in doc})

    @classmethod
    def load(cls, path) -> "HandParams":
        return cls.from_json(json.loads(Path(path).read_text()))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=1))


@dataclass(frozen=True, eq=False)
class PosedHand:
    vertices: np.ndarray
    joints: np.ndarray

    def mesh(self, template: HandTemplate) -> TriMesh:
        return TriMesh(self.vertices, template.mesh.faces)


def joint_scales(template: HandTemplate, shape) -> np.ndarray:
    """Per-joint multiplier on the offset from its parent."""
    shape = np.asarray(shape, dtype=float)
    sc = np.full(N_JOINTS, shape[0])
    for f in range(5):
        for k in (1, 2, 3):
            sc[1 + 4 * f + k] = shape[0] * shape[1 + f]
    return sc


def pose_hand(template: HandTemplate, params: HandParams) -> PosedHand:
    """Forward kinematics, linear blend skinning, then the global rigid motion.

    Bone rotations are expressed in the canonical (rest) frame. Vertices move
    by displacement so the zero pose reproduces the template exactly.
    """
    j0 = template.joints0
    par = template.parent
    sg = params.shape[0]
    scale = joint_scales(template, params.shape)
    local = np.zeros((N_JOINTS, 3, 3))
    local[:] = np.eye(3)
    rot_local = rodrigues(params.pose)
    jb = template.joint_bone
    for j in range(N_JOINTS):
        if jb[j] > 0:
            local[j] = rot_local[jb[j] - 1]

    world = np.zeros((N_JOINTS, 3, 3))
    disp = np.zeros((N_JOINTS, 3))
    world[0] = np.eye(3)
    for j in range(1, N_JOINTS):
        p = par[j]
        off = j0[j] - j0[p]
        disp[j] = disp[p] + world[p] @ (scale[j] * off) - sg * off
        world[j] = world[p] @ local[j]
    joints = sg * j0 + disp

    bj = template.bone_joint
    x = sg * template.mesh.vertices
    w = template.weights
    delta = np.zeros_like(x)
    for b in range(N_BONES):
        wb = w[:, b]
        nz = wb != 0
        if not nz.any():
            continue
        j = bj[b]
        rel = x[nz] - sg * j0[j]
        delta[nz] += wb[nz, None] * (rel @ (world[j] - np.eye(3)).T + disp[j])
    verts = x + delta

    rg = rodrigues(params.global_rot)
    return PosedHand(verts @ rg.T + params.trans, joints @ rg.T + params.trans)
