"""OBJ, binary PGM and XYZ readers/writers."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .core import GeometryError, PointCloud, TriMesh
from .planar import BinaryMask


def read_obj(path) -> TriMesh:
    verts, faces = [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            idx = [int(tok.split("/")[0]) for tok in parts[1:]]
            if len(idx) != 3:
                raise GeometryError(f"{path}: only triangle faces are supported")
            faces.append([i - 1 if i > 0 else len(verts) + i for i in idx])
    return TriMesh(np.asarray(verts, dtype=float).reshape(-1, 3),
                   np.asarray(faces, dtype=np.int64).reshape(-1, 3))


def write_obj(path, mesh: TriMesh):
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    Path(path).write_text("\n".join(lines) + "\n")


def read_xyz(path) -> PointCloud:
    pts = np.loadtxt(path, dtype=float, ndmin=2)
    return PointCloud(pts[:, :3])


def write_xyz(path, cloud: PointCloud):
    np.savetxt(path, cloud.points, fmt="%.9g")


def _pgm_tokens(data: bytes, count: int):
    """Header tokens of a PNM file, skipping comments; returns (tokens, offset)."""
    tokens, i = [], 0
    while len(tokens) < count:
        while data[i:i + 1].isspace():
            i += 1
        if data[i:i + 1] == b"#":
            while data[i:i + 1] not in (b"\n", b""):
                i += 1
            continue
        j = i
        while j < len(data) and not data[j:j + 1].isspace():
            j += 1
        tokens.append(data[i:j])
        i = j
    return tokens, i + 1


def read_pgm(path) -> BinaryMask:
    data = Path(path).read_bytes()
    (magic, w, h, maxval), off = _pgm_tokens(data, 4)
    if magic != b"P5":
        raise GeometryError(f"{path}: not a binary PGM (P5)")
    w, h, maxval = int(w), int(h), int(maxval)
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    px = np.frombuffer(data, dtype=dtype, count=w * h, offset=off)
    return BinaryMask(px.reshape(h, w) != 0)


def write_pgm(path, mask: BinaryMask):
    header = f"P5\n{mask.width} {mask.height}\n255\n".encode()
    Path(path).write_bytes(header + (mask.bits.astype(np.uint8) * 255).tobytes())
