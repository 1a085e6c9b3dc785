"""Point clouds, triangle meshes, nearest-neighbour search and quantiles."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.spatial import cKDTree


class GeometryError(ValueError):
    pass


def _frozen(arr, dtype):
    arr = np.array(arr, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


def pairwise_norm(a, b):
    """Euclidean norm of ``a - b`` along the last axis.

    Every distance that feeds a threshold comparison goes through this one
    formula so indexed and exhaustive searches agree bit for bit.
    """
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    return np.sqrt(np.sum(d * d, axis=-1))


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray

    def __post_init__(self):
        pts = _frozen(self.points, float)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise GeometryError(f"points must be (N, 3), got {pts.shape}")
        if len(pts) < 1:
            raise GeometryError("point cloud is empty")
        if not np.all(np.isfinite(pts)):
            raise GeometryError("point cloud has non-finite coordinates")
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True, eq=False)
class TriMesh:
    vertices: np.ndarray
    faces: np.ndarray
    watertight_flag: bool | None = field(default=None)

    def __post_init__(self):
        v = _frozen(self.vertices, float)
        f = _frozen(self.faces, np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise GeometryError(f"vertices must be (N, 3), got {v.shape}")
        if f.ndim != 2 or f.shape[1] != 3:
            raise GeometryError(f"faces must be (F, 3), got {f.shape}")
        if not np.all(np.isfinite(v)):
            raise GeometryError("mesh has non-finite vertices")
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise GeometryError("face index out of range")
        if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
            raise GeometryError("degenerate face (repeated vertex index)")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        if self.watertight_flag and not self.is_watertight:
            raise GeometryError("open surface")

    @cached_property
    def is_watertight(self) -> bool:
        """Closed, consistently oriented 2-manifold (possibly several components).

        Every directed edge must occur exactly once and be matched by its
        reverse.
        """
        if len(self.faces) == 0:
            return False
        f = self.faces
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        n = len(self.vertices)
        key = e[:, 0] * n + e[:, 1]
        if len(np.unique(key)) != len(key):
            return False
        rev = np.sort(e[:, 1] * n + e[:, 0])
        return bool(np.array_equal(np.sort(key), rev))

    @property
    def triangles(self) -> np.ndarray:
        return self.vertices[self.faces]

    def bounds(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def transformed(self, rot, trans) -> "TriMesh":
        v = self.vertices @ np.asarray(rot, dtype=float).T + np.asarray(trans, dtype=float)
        return TriMesh(v, self.faces, self.watertight_flag)


def require_watertight(mesh: TriMesh):
    if not mesh.is_watertight:
        raise GeometryError("open surface")


class SpatialIndex:
    """Exact nearest-neighbour index over a point cloud.

    A KD-tree proposes candidates; the answer is the candidate with the
    smallest :func:`pairwise_norm` distance, lowest index on ties, which is
    what an exhaustive scan returns.
    """

    def __init__(self, cloud: PointCloud | np.ndarray):
        if not isinstance(cloud, PointCloud):
            cloud = PointCloud(cloud)
        self.cloud = cloud
        self.points = cloud.points
        self._tree = cKDTree(self.points)

    def __len__(self):
        return len(self.points)

    def query(self, queries) -> tuple[np.ndarray, np.ndarray]:
        """Nearest neighbour of each row of ``queries``: (indices, distances)."""
        q = np.atleast_2d(np.asarray(queries, dtype=float))
        if not np.all(np.isfinite(q)):
            raise GeometryError("query has non-finite coordinates")
        n = len(self.points)
        k = min(n, 4)
        _, cand = self._tree.query(q, k=k)
        cand = cand.reshape(len(q), k)
        d = pairwise_norm(self.points[cand], q[:, None, :])
        best = np.min(d, axis=1)
        # Lowest index among exact ties within the k candidates.
        tie = d == best[:, None]
        idx = np.where(tie, cand, n).min(axis=1)
        # A tie may extend past the k candidates; settle those by a ball query.
        if k < n:
            kth = np.max(d, axis=1)
            crowded = np.nonzero(kth <= best * (1 + 1e-9) + 1e-12)[0]
            for i in crowded:
                ball = self._tree.query_ball_point(q[i], best[i] * (1 + 1e-9) + 1e-12)
                ball = np.asarray(ball, dtype=np.int64)
                db = pairwise_norm(self.points[ball], q[i])
                m = db.min()
                idx[i] = ball[db == m].min()
                best[i] = m
        return idx.astype(np.int64), best

    def knn(self, queries, k: int) -> tuple[np.ndarray, np.ndarray]:
        """k nearest neighbours, distances recomputed and sorted ascending."""
        q = np.atleast_2d(np.asarray(queries, dtype=float))
        k = min(k, len(self.points))
        _, idx = self._tree.query(q, k=k)
        idx = idx.reshape(len(q), k)
        d = pairwise_norm(self.points[idx], q[:, None, :])
        order = np.argsort(d, axis=1, kind="stable")
        return np.take_along_axis(idx, order, 1), np.take_along_axis(d, order, 1)

    def within(self, queries, radius: float) -> list[list[int]]:
        return self._tree.query_ball_point(np.atleast_2d(queries), radius)


def nearest_neighbor(index: SpatialIndex, query) -> tuple[int, float]:
    idx, dist = index.query(np.asarray(query, dtype=float)[None, :])
    return int(idx[0]), float(dist[0])


def quantile(values, q: float) -> float:
    """Linear-interpolation quantile between order statistics."""
    v = np.asarray(values, dtype=float).ravel()
    if v.size == 0:
        raise GeometryError("empty sample")
    if not np.all(np.isfinite(v)):
        raise GeometryError("non-finite sample")
    if not 0.0 <= q <= 1.0:
        raise GeometryError(f"quantile level {q} outside [0, 1]")
    v = np.sort(v)
    pos = q * (len(v) - 1)
    lo = int(np.floor(pos))
    hi = min(lo + 1, len(v) - 1)
    frac = pos - lo
    return float(v[lo] + (v[hi] - v[lo]) * frac)


def mean_knn_distance(cloud: PointCloud, k: int, index: SpatialIndex | None = None) -> float:
    """Mean distance from each point to its k nearest other points."""
    n = len(cloud)
    if n < 2:
        return 0.0
    k = min(k, n - 1)
    index = index or SpatialIndex(cloud)
    _, d = index.knn(cloud.points, k + 1)
    # Column 0 is the point itself (or a duplicate at distance 0).
    return float(np.mean(np.mean(d[:, 1:], axis=1)))


def sample_surface(mesh: TriMesh, n: int, rng: np.random.Generator) -> PointCloud:
    """Area-weighted uniform samples on the mesh surface."""
    tri = mesh.triangles
    area = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    face = rng.choice(len(tri), size=n, p=area / area.sum())
    u, v = rng.random(n), rng.random(n)
    flip = u + v > 1
    u[flip], v[flip] = 1 - u[flip], 1 - v[flip]
    t = tri[face]
    return PointCloud(t[:, 0] + u[:, None] * (t[:, 1] - t[:, 0]) + v[:, None] * (t[:, 2] - t[:, 0]))
