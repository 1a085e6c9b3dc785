"""Inside tests, point-to-surface distance and voxel occupancy for triangle meshes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .core import GeometryError, TriMesh, require_watertight

# Points x faces evaluated per vectorised block.
_BLOCK = 1 << 21
DEFAULT_CELL_BUDGET = 20_000_000


def winding_number(mesh: TriMesh, points) -> np.ndarray:
    """Generalized winding number of ``points`` w.r.t. the mesh.

    Sum of signed solid angles of the triangles (Van Oosterom-Strackee), over
    4 pi. ~1 inside a closed outward-oriented surface, ~0 outside.
    """
    p = np.atleast_2d(np.asarray(points, dtype=float))
    tri = mesh.triangles
    out = np.zeros(len(p))
    if len(p) == 0:
        return out
    step = max(1, _BLOCK // max(1, len(tri)))
    for s in range(0, len(p), step):
        q = p[s:s + step, None, :]
        a = tri[None, :, 0] - q
        b = tri[None, :, 1] - q
        c = tri[None, :, 2] - q
        la = np.linalg.norm(a, axis=-1)
        lb = np.linalg.norm(b, axis=-1)
        lc = np.linalg.norm(c, axis=-1)
        det = np.einsum("ijk,ijk->ij", a, np.cross(b, c))
        denom = (la * lb * lc
                 + np.einsum("ijk,ijk->ij", a, b) * lc
                 + np.einsum("ijk,ijk->ij", b, c) * la
                 + np.einsum("ijk,ijk->ij", c, a) * lb)
        out[s:s + step] = np.arctan2(det, denom).sum(axis=1) / (2.0 * np.pi)
    return out


def points_inside(mesh: TriMesh, points, prefilter: bool = True) -> np.ndarray:
    """Boolean inside mask, winding number > 0.5. Mesh must be watertight."""
    require_watertight(mesh)
    p = np.atleast_2d(np.asarray(points, dtype=float))
    inside = np.zeros(len(p), dtype=bool)
    if prefilter:
        lo, hi = mesh.bounds()
        cand = np.nonzero(np.all((p >= lo) & (p <= hi), axis=1))[0]
    else:
        cand = np.arange(len(p))
    if len(cand):
        inside[cand] = winding_number(mesh, p[cand]) > 0.5
    return inside


def point_inside_mesh(mesh: TriMesh, p) -> bool:
    return bool(points_inside(mesh, np.asarray(p, dtype=float)[None, :])[0])


def closest_point_on_triangle(p, a, b, c) -> np.ndarray:
    """Closest point on triangle(s) abc to p; all arguments broadcast over (..., 3).

    Region classification after Ericson, Real-Time Collision Detection 5.1.5.
    """
    p, a, b, c = np.broadcast_arrays(*(np.asarray(x, dtype=float) for x in (p, a, b, c)))
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("...k,...k", ab, ap)
    d2 = np.einsum("...k,...k", ac, ap)
    bp = p - b
    d3 = np.einsum("...k,...k", ab, bp)
    d4 = np.einsum("...k,...k", ac, bp)
    cp = p - c
    d5 = np.einsum("...k,...k", ab, cp)
    d6 = np.einsum("...k,...k", ac, cp)

    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    with np.errstate(divide="ignore", invalid="ignore"):
        denom = va + vb + vc
        v = np.where(denom != 0, vb / denom, 0.0)
        w = np.where(denom != 0, vc / denom, 0.0)
        out = a + ab * v[..., None] + ac * w[..., None]

        # Later assignments win, so regions are applied in reverse order of
        # the reference's early returns.
        m = (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0)
        t = np.where(m, (d4 - d3) / np.where(m, (d4 - d3) + (d5 - d6), 1.0), 0.0)
        out = np.where(m[..., None], b + (c - b) * t[..., None], out)

        m = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
        t = np.where(m, d2 / np.where(m, d2 - d6, 1.0), 0.0)
        out = np.where(m[..., None], a + ac * t[..., None], out)

        out = np.where(((d6 >= 0) & (d5 <= d6))[..., None], c, out)

        m = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
        t = np.where(m, d1 / np.where(m, d1 - d3, 1.0), 0.0)
        out = np.where(m[..., None], a + ab * t[..., None], out)

    out = np.where(((d3 >= 0) & (d4 <= d3))[..., None], b, out)
    out = np.where(((d1 <= 0) & (d2 <= 0))[..., None], a, out)
    return out


def _closest_pairs(p, tri, pi, fi):
    """Distances and closest points for explicit (point, face) index pairs."""
    d = np.empty(len(pi))
    cp = np.empty((len(pi), 3))
    step = _BLOCK // 4
    for s in range(0, len(pi), step):
        q, t = p[pi[s:s + step]], tri[fi[s:s + step]]
        c = closest_point_on_triangle(q, t[:, 0], t[:, 1], t[:, 2])
        cp[s:s + step] = c
        d[s:s + step] = np.linalg.norm(c - q, axis=-1)
    return d, cp


def closest_on_mesh_brute(mesh: TriMesh, points):
    """Reference version of :func:`closest_on_mesh` testing every face."""
    p = np.atleast_2d(np.asarray(points, dtype=float))
    nf = len(mesh.faces)
    pi = np.repeat(np.arange(len(p)), nf)
    fi = np.tile(np.arange(nf), len(p))
    d, cp = _closest_pairs(p, mesh.triangles, pi, fi)
    d, cp = d.reshape(len(p), nf), cp.reshape(len(p), nf, 3)
    j = np.argmin(d, axis=1)  # first face among equal distances
    r = np.arange(len(p))
    return d[r, j], j, cp[r, j]


def closest_on_mesh(mesh: TriMesh, points) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Unsigned distance from each point to the surface.

    Returns (distance, face index, closest point); ties go to the lowest face
    index. Faces are culled with bounding spheres around their centroids:
    the distance to the face with the nearest centroid bounds the answer, and
    only faces whose sphere comes within that bound are evaluated exactly.
    """
    p = np.atleast_2d(np.asarray(points, dtype=float))
    tri = mesh.triangles
    if len(p) == 0:
        return np.zeros(0), np.zeros(0, dtype=np.int64), np.zeros((0, 3))
    if len(p) * len(tri) <= 50_000:
        return closest_on_mesh_brute(mesh, p)
    cen = tri.mean(axis=1)
    rad = np.linalg.norm(tri - cen[:, None], axis=-1).max(axis=1)
    tree = cKDTree(cen)
    _, j0 = tree.query(p)
    ub, _ = _closest_pairs(p, tri, np.arange(len(p)), j0)
    ub = ub * (1 + 1e-9) + 1e-9 * (1.0 + rad.max())
    lists = tree.query_ball_point(p, ub + rad.max())
    pi = np.repeat(np.arange(len(p)), [len(l) for l in lists])
    fi = np.fromiter((f for l in lists for f in l), dtype=np.int64, count=len(pi))
    keep = np.linalg.norm(p[pi] - cen[fi], axis=1) - rad[fi] <= ub[pi]
    pi, fi = pi[keep], fi[keep]
    d, cp = _closest_pairs(p, tri, pi, fi)
    order = np.lexsort((fi, d, pi))
    first = order[np.r_[True, pi[order][1:] != pi[order][:-1]]]
    return d[first], fi[first], cp[first]


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    origin: np.ndarray
    voxel_size: float
    dims: tuple[int, int, int]
    occupancy: np.ndarray  # bool, C-order over dims

    def __post_init__(self):
        if any(d < 1 for d in self.dims):
            raise GeometryError("voxel grid dims must be >= 1")
        if self.occupancy.size != int(np.prod(self.dims)):
            raise GeometryError("occupancy length does not match dims")

    def centers(self) -> np.ndarray:
        return grid_centers(self.origin, self.voxel_size, self.dims)


def _edge_tie(nx, ny):
    # A point exactly on an edge belongs to the triangle whose interior lies
    # toward +x (or +y when the edge is parallel to x).
    return (nx > 0) | ((nx == 0) & (ny > 0))


def grid_inside(mesh: TriMesh, xs, ys, zs) -> np.ndarray:
    """Inside flags for the grid ``xs x ys x zs`` (shape (nx, ny, nz)).

    Counts signed crossings of a +z ray from every grid point, one column at a
    time, which gives the winding number exactly for a closed surface. Edge
    functions are evaluated on canonically ordered endpoints so a column through
    a shared edge or vertex is counted once.
    """
    require_watertight(mesh)
    xs, ys, zs = (np.asarray(a, dtype=float) for a in (xs, ys, zs))
    wind = np.zeros((len(xs), len(ys), len(zs) + 1), dtype=np.int64)
    tri = mesh.triangles
    lo2, hi2 = tri[:, :, :2].min(axis=1), tri[:, :, :2].max(axis=1)
    i0 = np.searchsorted(xs, lo2[:, 0], "left")
    i1 = np.searchsorted(xs, hi2[:, 0], "right")
    j0 = np.searchsorted(ys, lo2[:, 1], "left")
    j1 = np.searchsorted(ys, hi2[:, 1], "right")
    for f in np.nonzero((i1 > i0) & (j1 > j0))[0]:
        t = tri[f]
        area = (t[1, 0] - t[0, 0]) * (t[2, 1] - t[0, 1]) - (t[1, 1] - t[0, 1]) * (t[2, 0] - t[0, 0])
        if area == 0.0:
            continue  # vertical face: the ray grazes it
        sgn = 1.0 if area > 0 else -1.0
        px, py = np.meshgrid(xs[i0[f]:i1[f]], ys[j0[f]:j1[f]], indexing="ij")
        ok = np.ones(px.shape, dtype=bool)
        bary = []
        for u, v in ((0, 1), (1, 2), (2, 0)):
            fwd = (t[u, 0], t[u, 1]) <= (t[v, 0], t[v, 1])
            a, b = (t[u], t[v]) if fwd else (t[v], t[u])
            flip = 1.0 if fwd else -1.0
            e = (b[0] - a[0]) * (py - a[1]) - (b[1] - a[1]) * (px - a[0])
            k = sgn * flip
            nx, ny = -(b[1] - a[1]) * k, (b[0] - a[0]) * k
            ok &= (e * k > 0) | ((e == 0) & _edge_tie(nx, ny))
            bary.append(e * k)
        if not ok.any():
            continue
        # edge (u, v) is proportional to the weight of the vertex opposite it
        wsum = bary[0] + bary[1] + bary[2]
        wsum = np.where(wsum == 0, 1.0, wsum)
        zc = (bary[1] * t[0, 2] + bary[2] * t[1, 2] + bary[0] * t[2, 2]) / wsum
        ii, jj = np.nonzero(ok)
        cut = np.searchsorted(zs, zc[ii, jj], "left")  # grid points strictly below the crossing
        # outward faces seen from below with the +z ray: exiting (+1) has area > 0
        d = 1 if area > 0 else -1
        np.add.at(wind, (ii + i0[f], jj + j0[f], np.zeros_like(cut)), d)
        np.add.at(wind, (ii + i0[f], jj + j0[f], cut), -d)
    return np.cumsum(wind, axis=2)[:, :, :-1] > 0


def grid_for(mesh: TriMesh, voxel_size: float, cell_budget: int = DEFAULT_CELL_BUDGET):
    if not voxel_size > 0:
        raise GeometryError("voxel_size must be positive")
    lo, hi = mesh.bounds()
    dims = tuple(int(max(1, np.ceil((h - l) / voxel_size - 1e-9))) for l, h in zip(lo, hi))
    if int(np.prod(dims, dtype=np.int64)) > cell_budget:
        raise GeometryError("grid too large")
    return lo.copy(), dims


def grid_centers(origin, voxel_size, dims) -> np.ndarray:
    axes = [origin[i] + (np.arange(dims[i]) + 0.5) * voxel_size for i in range(3)]
    g = np.meshgrid(*axes, indexing="ij")
    return np.stack([x.ravel() for x in g], axis=1)


def voxelize(mesh: TriMesh, voxel_size: float, cell_budget: int = DEFAULT_CELL_BUDGET) -> VoxelGrid:
    """Occupancy of voxel centres over the mesh bounding box."""
    require_watertight(mesh)
    origin, dims = grid_for(mesh, voxel_size, cell_budget)
    axes = [origin[i] + (np.arange(dims[i]) + 0.5) * voxel_size for i in range(3)]
    occ = grid_inside(mesh, *axes).ravel()
    return VoxelGrid(origin, float(voxel_size), dims, occ)


def voxelize_and_inside_volume(container: TriMesh, probe: TriMesh, voxel_size: float,
                               cell_budget: int = DEFAULT_CELL_BUDGET) -> float:
    """Volume (cm^3) of container voxels whose centres lie inside the probe.

    The grid is anchored on the container's bounding box; only centres inside
    the probe's bounding box are tested, which does not change the count.
    """
    require_watertight(container)
    require_watertight(probe)
    origin, dims = grid_for(container, voxel_size, cell_budget)
    plo, phi = probe.bounds()
    axes = []
    for i in range(3):
        c = origin[i] + (np.arange(dims[i]) + 0.5) * voxel_size
        axes.append(c[(c >= plo[i]) & (c <= phi[i])])
    if any(len(a) == 0 for a in axes):
        return 0.0
    both = grid_inside(probe, *axes) & grid_inside(container, *axes)
    return float(both.sum()) * voxel_size ** 3 / 1000.0
