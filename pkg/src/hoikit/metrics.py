"""Evaluation metrics: MPVPE, penetration, part-contact IoU/F1, diversity and P-FID."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .geom import GeometryError, PointCloud, TriMesh, closest_on_mesh, points_inside, \
    require_watertight, voxelize_and_inside_volume
from .hand import ContactLabel7


def mpvpe(pred, gt) -> float:
    """Mean per-vertex Euclidean error (input units, mm)."""
    p = np.asarray(pred, dtype=float)
    g = np.asarray(gt, dtype=float)
    if p.shape != g.shape:
        raise ValueError(f"vertex count mismatch: {p.shape} vs {g.shape}")
    return float(np.mean(np.linalg.norm(p - g, axis=-1)))


def penetration_depth(hand: TriMesh, obj: TriMesh) -> float:
    """Deepest hand vertex inside the object, as distance to the object surface (cm)."""
    require_watertight(obj)
    inside = points_inside(obj, hand.vertices)
    if not inside.any():
        return 0.0
    d, _, _ = closest_on_mesh(obj, hand.vertices[inside])
    return float(d.max()) / 10.0


def penetration_volume(hand: TriMesh, obj: TriMesh, voxel_size: float = 1.0) -> float:
    """Object volume enclosed by the hand surface (cm^3)."""
    return voxelize_and_inside_volume(obj, hand, voxel_size)


def _bits(x) -> np.ndarray:
    if isinstance(x, ContactLabel7):
        return x.as_array()
    if isinstance(x, str):
        return np.array([c == "1" for c in x.strip()])
    return np.asarray(x).astype(bool).ravel()


def part_iou_f1(pred, gt) -> tuple[float, float]:
    """Set IoU and F1 over contacted parts; both 1 when neither side has contact."""
    p, g = _bits(pred), _bits(gt)
    if p.shape != g.shape:
        raise ValueError("label lengths differ")
    inter = int(np.sum(p & g))
    union = int(np.sum(p | g))
    if union == 0:
        return 1.0, 1.0
    if not p.any() or not g.any():
        return 0.0, 0.0
    iou = inter / union
    f1 = 2.0 * inter / (int(p.sum()) + int(g.sum()))
    return iou, f1


# ---------------------------------------------------------------- diversity

def _sqdist(x, c):
    return np.sum(x * x, axis=1)[:, None] - 2.0 * x @ c.T + np.sum(c * c, axis=1)[None, :]


def kmeans(features, k: int = 20, seed: int = 0, max_iter: int = 300):
    """Lloyd's algorithm with k-means++ seeding.

    Empty clusters are re-seeded with the point farthest from its centroid.
    Returns (assignments, centroids).
    """
    x = np.asarray(features, dtype=float)
    x = x.reshape(len(x), -1)
    n = len(x)
    if n < k:
        raise ValueError(f"need at least k={k} samples, got {n}")
    rng = np.random.default_rng(seed)
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for c in range(1, k):
        tot = d2.sum()
        i = rng.choice(n, p=d2 / tot) if tot > 0 else int(rng.integers(n))
        centers[c] = x[i]
        d2 = np.minimum(d2, np.sum((x - centers[c]) ** 2, axis=1))

    assign = None
    for _ in range(max_iter):
        dist = np.maximum(_sqdist(x, centers), 0.0)
        new = np.argmin(dist, axis=1)
        for c in range(k):
            if not np.any(new == c):
                far = int(np.argmax(dist[np.arange(n), new]))
                new[far] = c
                dist[far] = 0.0
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        for c in range(k):
            centers[c] = x[assign == c].mean(axis=0)
    return assign, centers


def diversity(features, k: int = 20, seed: int = 0, unit_to_cm: float = 0.1):
    """Entropy (nats) of k-means assignments and mean sample-to-centroid distance (cm)."""
    x = np.asarray(features, dtype=float).reshape(len(features), -1)
    assign, centers = kmeans(x, k, seed)
    p = np.bincount(assign, minlength=k) / len(assign)
    p = p[p > 0]
    entropy = float(-np.sum(p * np.log(p)))
    cs = float(np.mean(np.linalg.norm(x - centers[assign], axis=1))) * unit_to_cm
    return entropy, cs


def diversity_features(vertices_list, wrists) -> np.ndarray:
    """Flattened hand vertices relative to the wrist joint, one row per sample."""
    return np.stack([(np.asarray(v) - np.asarray(w)).ravel() for v, w in zip(vertices_list, wrists)])


# ---------------------------------------------------------------- P-FID

def _psd_sqrt(a):
    w, v = np.linalg.eigh(0.5 * (a + a.T))
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(mu_a, cov_a, mu_b, cov_b) -> float:
    """Frechet distance between two Gaussians.

    tr((A B)^{1/2}) equals the sum of the square roots of the eigenvalues of
    the symmetric product A^{1/2} B A^{1/2}. Those are the singular values of
    A^{1/2} B^{1/2}, which are taken directly so that near-zero eigenvalues
    are not square-rooted round-off.
    """
    mu_a, mu_b = np.atleast_1d(mu_a).astype(float), np.atleast_1d(mu_b).astype(float)
    cov_a, cov_b = np.atleast_2d(cov_a).astype(float), np.atleast_2d(cov_b).astype(float)
    dim = len(mu_a)
    if mu_b.shape != (dim,) or cov_a.shape != (dim, dim) or cov_b.shape != (dim, dim):
        raise ValueError("dimension mismatch")
    for c in (cov_a, cov_b):
        if np.max(np.abs(c - c.T), initial=0.0) > 1e-8 * max(1.0, np.max(np.abs(c), initial=0.0)):
            raise ValueError("covariance is not symmetric")
    tr_sqrt = float(np.sum(np.linalg.svd(_psd_sqrt(cov_a) @ _psd_sqrt(cov_b), compute_uv=False)))
    diff = mu_a - mu_b
    val = float(diff @ diff) + float(np.trace(cov_a) + np.trace(cov_b)) - 2.0 * tr_sqrt
    return max(val, 0.0)


@dataclass(frozen=True)
class FeatureExtractor:
    name: str
    dim: int
    fn: Callable[[np.ndarray], np.ndarray] = field(repr=False, compare=False)

    def __call__(self, cloud) -> np.ndarray:
        pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=float)
        out = np.asarray(self.fn(pts), dtype=float)
        if out.shape != (self.dim,):
            raise ValueError(f"extractor {self.name} produced shape {out.shape}")
        return out


_THIRD = [(0, 0, 0), (1, 1, 1), (2, 2, 2), (0, 0, 1), (0, 0, 2),
          (0, 1, 1), (1, 1, 2), (0, 2, 2), (1, 2, 2), (0, 1, 2)]
HIST_BINS = 16
HIST_RANGE_CM = 25.0
HIST_MAX_POINTS = 512


def _moments_v1(pts: np.ndarray) -> np.ndarray:
    """Centroid-relative 2nd (9) and 3rd (10) moments plus a 16-bin distance histogram.

    Coordinates are converted to cm; the histogram uses a fixed stride
    subsample of at most 512 points.
    """
    x = (pts - pts.mean(axis=0)) / 10.0
    second = (x.T @ x / len(x)).ravel()
    third = np.array([np.mean(x[:, i] * x[:, j] * x[:, k]) for i, j, k in _THIRD])
    sub = x[:: max(1, int(np.ceil(len(x) / HIST_MAX_POINTS)))]
    if len(sub) > 1:
        iu = np.triu_indices(len(sub), k=1)
        d = np.linalg.norm(sub[iu[0]] - sub[iu[1]], axis=1)
        hist, _ = np.histogram(np.minimum(d, HIST_RANGE_CM), bins=HIST_BINS, range=(0.0, HIST_RANGE_CM))
        hist = hist / len(d)
    else:
        hist = np.zeros(HIST_BINS)
    return np.concatenate([second, third, hist])


EXTRACTORS = {"moments-v1": FeatureExtractor("moments-v1", 35, _moments_v1)}


def get_extractor(name: str = "moments-v1") -> FeatureExtractor:
    try:
        return EXTRACTORS[name]
    except KeyError:
        raise ValueError(f"unknown feature extractor {name!r}") from None


def gaussian_fit(features: np.ndarray, shrinkage: float = 1e-6):
    f = np.asarray(features, dtype=float)
    mu = f.mean(axis=0)
    dim = f.shape[1]
    cov = np.cov(f, rowvar=False) if len(f) > 1 else np.zeros((dim, dim))
    cov = np.atleast_2d(cov)
    if len(f) < dim + 1:
        cov = cov + shrinkage * np.eye(dim)
    return mu, cov


def p_fid(set_a, set_b, extractor: FeatureExtractor | str = "moments-v1") -> float:
    ext = get_extractor(extractor) if isinstance(extractor, str) else extractor
    fa = np.stack([ext(c) for c in set_a])
    fb = np.stack([ext(c) for c in set_b])
    return frechet_distance(*gaussian_fit(fa), *gaussian_fit(fb))


# ---------------------------------------------------------------- report

TABLE_COLUMNS = (("P-IoU", "p_iou"), ("P-F1", "p_f1"), ("MPVPE", "mpvpe"), ("PD", "pd"),
                 ("PV", "pv"), ("Ent.", "entropy"), ("CS", "cluster_size"), ("P-FID", "p_fid"))
PER_SAMPLE = ("mpvpe", "pd", "pv", "p_iou", "p_f1")


@dataclass
class MetricReport:
    samples: list[dict] = field(default_factory=list)
    entropy: float | None = None
    cluster_size: float | None = None
    p_fid: float | None = None
    meta: dict = field(default_factory=dict)

    @property
    def aggregate(self) -> dict:
        if not self.samples:
            return {}
        return {k: float(np.mean([s[k] for s in self.samples])) for k in PER_SAMPLE}

    def to_json(self) -> dict:
        return {
            "samples": self.samples,
            "aggregate": self.aggregate,
            "diversity": {"entropy": self.entropy, "cluster_size": self.cluster_size},
            "p_fid": self.p_fid,
            "meta": self.meta,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1, sort_keys=True)

    def to_table(self) -> str:
        head = ["sample"] + [c for c, _ in TABLE_COLUMNS]
        rows = []
        for s in self.samples:
            rows.append([str(s["id"])] + [_fmt(s.get(k)) for _, k in TABLE_COLUMNS])
        agg = dict(self.aggregate, entropy=self.entropy, cluster_size=self.cluster_size, p_fid=self.p_fid)
        rows.append(["mean"] + [_fmt(agg.get(k)) for _, k in TABLE_COLUMNS])
        widths = [max(len(r[i]) for r in [head] + rows) for i in range(len(head))]
        lines = ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in [head] + rows]
        return "\n".join(lines) + "\n"


def _fmt(v):
    return "-" if v is None else f"{v:.4f}"
