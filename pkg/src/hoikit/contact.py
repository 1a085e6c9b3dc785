"""Robust contact maps between a hand and an object point cloud."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .geom import PointCloud, SpatialIndex, mean_knn_distance, pairwise_norm, quantile
from .hand import ContactLabel7, contact_label7


@dataclass(frozen=True)
class ContactParams:
    alpha: float = 0.10  # vote quantile
    beta: float = 0.50  # distance quantile over candidates
    eps: float = 5.0  # absolute distance threshold, mm
    gamma: float = 2.0  # expansion radius in units of mean k-NN spacing
    k: int = 8

    def __post_init__(self):
        if not (0 < self.alpha < 1 and 0 < self.beta < 1):
            raise ValueError("alpha and beta must lie in (0, 1)")
        if self.eps <= 0 or self.gamma < 0 or self.k < 1:
            raise ValueError("need eps > 0, gamma >= 0, k >= 1")

    def to_json(self) -> dict:
        return asdict(self)


def _cloud(x) -> PointCloud:
    return x if isinstance(x, PointCloud) else PointCloud(x)


def bidirectional_votes(obj, hand, obj_index: SpatialIndex | None = None,
                        hand_index: SpatialIndex | None = None):
    """Count how often each point is the nearest neighbour of a point on the other side.

    Returns (vote_o, vote_h, d_o, d_h) where d_* is each point's distance to
    its nearest neighbour on the other side.
    """
    obj, hand = _cloud(obj), _cloud(hand)
    obj_index = obj_index or SpatialIndex(obj)
    hand_index = hand_index or SpatialIndex(hand)
    nn_of_hand, d_h = obj_index.query(hand.points)
    nn_of_obj, d_o = hand_index.query(obj.points)
    vote_o = np.bincount(nn_of_hand, minlength=len(obj))
    vote_h = np.bincount(nn_of_obj, minlength=len(hand))
    return vote_o, vote_h, d_o, d_h


def _one_side(cloud: PointCloud, index: SpatialIndex, votes, dist, p: ContactParams):
    cand = votes >= quantile(votes, 1.0 - p.alpha)
    thr = min(quantile(dist[cand], p.beta), p.eps)
    core = cand & (dist < thr)
    if not core.any():
        return np.zeros(len(cloud), dtype=bool)
    radius = p.gamma * mean_knn_distance(cloud, p.k, index)
    core_idx = SpatialIndex(cloud.points[core])
    _, d = core_idx.query(cloud.points)
    return d <= radius


def compute_contact_maps(obj, hand, p: ContactParams | None = None):
    """Object and hand contact maps (bool arrays) by vote, distance and expansion stages."""
    p = p or ContactParams()
    obj, hand = _cloud(obj), _cloud(hand)
    oi, hi = SpatialIndex(obj), SpatialIndex(hand)
    vote_o, vote_h, d_o, d_h = bidirectional_votes(obj, hand, oi, hi)
    c_o = _one_side(obj, oi, vote_o, d_o, p)
    c_h = _one_side(hand, hi, vote_h, d_h, p)
    return c_o, c_h


def distance_map(joints, obj) -> np.ndarray:
    """(21, N_O) distances from each joint to each object point."""
    j = np.asarray(joints, dtype=float)
    o = _cloud(obj).points
    return pairwise_norm(j[:, None, :], o[None, :, :])


def dataset_contact_annotation(hand_vertices, obj, p: ContactParams | None = None,
                               part_label=None, min_hits: int = 3):
    """Contact maps plus the 7-bit part label, as used to annotate a sample.

    ``part_label`` defaults to the default template's labels.
    """
    if part_label is None:
        from .hand import default_template
        part_label = default_template().part_label
    c_o, c_h = compute_contact_maps(obj, hand_vertices, p)
    label: ContactLabel7 = contact_label7(c_h, part_label, min_hits)
    return c_h, c_o, label
