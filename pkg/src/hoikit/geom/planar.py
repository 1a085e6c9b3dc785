"""2D affine estimation and binary-mask operations."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .core import GeometryError


@dataclass(frozen=True, eq=False)
class Affine2:
    """2x3 row-major map from source pixel coordinates to destination ones."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=float, copy=True).reshape(2, 3)
        if not np.all(np.isfinite(m)):
            raise GeometryError("affine has non-finite entries")
        if np.linalg.det(m[:, :2]) == 0.0:
            raise GeometryError("singular linear part")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls):
        return cls(np.eye(2, 3))

    @classmethod
    def from_rotation(cls, deg: float, center=(0.0, 0.0), scale=(1.0, 1.0), shift=(0.0, 0.0)):
        """Rotation about ``center``, then optional axis scaling, then shift."""
        t = np.deg2rad(deg)
        r = np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])
        lin = np.diag(scale) @ r
        c = np.asarray(center, dtype=float)
        off = c - lin @ c + np.asarray(shift, dtype=float)
        return cls(np.hstack([lin, off[:, None]]))

    @property
    def linear(self):
        return self.matrix[:, :2]

    def apply(self, pts) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        return pts @ self.linear.T + self.matrix[:, 2]

    def inverse(self) -> "Affine2":
        inv = np.linalg.inv(self.linear)
        return Affine2(np.hstack([inv, (-inv @ self.matrix[:, 2])[:, None]]))


def _solve_affine(src, dst) -> np.ndarray:
    """Least-squares affine (2x3) with src -> dst; exact for 3 points."""
    a = np.hstack([src, np.ones((len(src), 1))])
    sol, *_ = np.linalg.lstsq(a, dst, rcond=None)
    return sol.T


def estimate_affine_ransac(src, dst, iterations: int = 1000, inlier_tol: float = 3.0,
                           seed: int = 0) -> tuple[Affine2, int]:
    src = np.asarray(src, dtype=float).reshape(-1, 2)
    dst = np.asarray(dst, dtype=float).reshape(-1, 2)
    if len(src) != len(dst):
        raise GeometryError("src and dst differ in length")
    if len(src) < 3:
        raise GeometryError("underdetermined")
    n = len(src)
    diag = float(np.linalg.norm(src.max(axis=0) - src.min(axis=0)))
    col_tol = 1e-6 * diag
    rng = np.random.default_rng(seed)

    best_mask = None
    best_count = -1
    for _ in range(iterations):
        i = rng.choice(n, size=3, replace=False)
        p0, p1, p2 = src[i]
        base = np.linalg.norm(p1 - p0)
        if base <= col_tol:
            continue
        # distance of p2 from the line p0-p1
        e1, e2 = p1 - p0, p2 - p0
        height = abs(e1[0] * e2[1] - e1[1] * e2[0]) / base
        if height <= col_tol:
            continue
        m = _solve_affine(src[i], dst[i])
        res = np.linalg.norm(src @ m[:, :2].T + m[:, 2] - dst, axis=1)
        mask = res < inlier_tol
        count = int(mask.sum())
        if count > best_count:
            best_count, best_mask = count, mask
    if best_mask is None:
        raise GeometryError("degenerate correspondences")
    m = _solve_affine(src[best_mask], dst[best_mask])
    return Affine2(m), best_count


def rotation_angle_from_affine(a: Affine2 | np.ndarray) -> float:
    """Rotation (degrees, in (-180, 180]) of the polar factor of the linear block."""
    m = a.matrix if isinstance(a, Affine2) else np.asarray(a, dtype=float).reshape(2, 3)
    rs = m[:, :2]
    u, s, vt = np.linalg.svd(rs)
    if s[-1] == 0.0 or s[-1] <= 1e-12 * s[0]:
        raise GeometryError("singular linear part")
    r = u @ vt
    theta = float(np.degrees(np.arctan2(r[1, 0], r[0, 0])))
    return 180.0 if theta == -180.0 else theta


@dataclass(frozen=True, eq=False)
class BinaryMask:
    bits: np.ndarray  # bool, shape (height, width)

    def __post_init__(self):
        b = np.array(self.bits, dtype=bool, copy=True)
        if b.ndim != 2:
            raise GeometryError("mask must be 2D")
        b.setflags(write=False)
        object.__setattr__(self, "bits", b)

    @classmethod
    def empty(cls, width: int, height: int):
        return cls(np.zeros((height, width), dtype=bool))

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    def count(self) -> int:
        return int(self.bits.sum())

    def __eq__(self, other):
        return isinstance(other, BinaryMask) and np.array_equal(self.bits, other.bits)


def warp_mask(mask: BinaryMask, a: Affine2, out_dims: tuple[int, int] | None = None) -> BinaryMask:
    """Nearest-neighbour forward warp; destinations sampling outside the source are 0.

    Pixel centres sit on integer coordinates.
    """
    w, h = out_dims if out_dims is not None else (mask.width, mask.height)
    inv = a.inverse()
    ys, xs = np.mgrid[0:h, 0:w]
    src = inv.apply(np.stack([xs.ravel(), ys.ravel()], axis=1).astype(float))
    # Snap to the nearest pixel, absorbing round-off from the inverse.
    sx = np.floor(np.round(src[:, 0], 9) + 0.5).astype(np.int64)
    sy = np.floor(np.round(src[:, 1], 9) + 0.5).astype(np.int64)
    ok = (sx >= 0) & (sx < mask.width) & (sy >= 0) & (sy < mask.height)
    out = np.zeros(h * w, dtype=bool)
    out[ok] = mask.bits[sy[ok], sx[ok]]
    return BinaryMask(out.reshape(h, w))


def mask_iou(a: BinaryMask, b: BinaryMask) -> float:
    if a.bits.shape != b.bits.shape:
        raise GeometryError("mask dimensions differ")
    union = np.count_nonzero(a.bits | b.bits)
    if union == 0:
        return 1.0
    return np.count_nonzero(a.bits & b.bits) / union


def dilate(mask: BinaryMask, radius: int) -> BinaryMask:
    """Dilation by a (2r+1) x (2r+1) square."""
    if radius <= 0:
        return mask
    st = np.ones((2 * radius + 1, 2 * radius + 1), dtype=bool)
    return BinaryMask(ndimage.binary_dilation(mask.bits, structure=st))
