from .core import (
    GeometryError,
    PointCloud,
    SpatialIndex,
    TriMesh,
    mean_knn_distance,
    nearest_neighbor,
    pairwise_norm,
    quantile,
    require_watertight,
    sample_surface,
)
from .io import read_obj, read_pgm, read_xyz, write_obj, write_pgm, write_xyz
from .mesh import (
    VoxelGrid,
    closest_on_mesh,
    closest_on_mesh_brute,
    closest_point_on_triangle,
    point_inside_mesh,
    points_inside,
    voxelize,
    voxelize_and_inside_volume,
    winding_number,
)
from .planar import (
    Affine2,
    BinaryMask,
    dilate,
    estimate_affine_ransac,
    mask_iou,
    rotation_angle_from_affine,
    warp_mask,
)
from .shapes import box_mesh, icosphere

__all__ = [
    "Affine2", "BinaryMask", "GeometryError", "PointCloud", "SpatialIndex", "TriMesh",
    "VoxelGrid", "box_mesh", "closest_on_mesh", "closest_on_mesh_brute", "closest_point_on_triangle", "dilate",
    "estimate_affine_ransac", "icosphere", "mask_iou", "mean_knn_distance",
    "nearest_neighbor", "pairwise_norm", "point_inside_mesh", "points_inside", "quantile",
    "read_obj", "read_pgm", "read_xyz", "require_watertight", "rotation_angle_from_affine",
    "sample_surface", "voxelize", "voxelize_and_inside_volume", "warp_mask",
    "winding_number", "write_obj", "write_pgm", "write_xyz",
]
