"""Frame-to-frame association of points and planes.

Both matchers assume small inter-frame motion: point matches are gated
by a pixel radius around the previous location, and plane matches must
share image support (inlier-mask overlap) in addition to agreeing in
normal direction and origin distance.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List

import numpy as np

from .geometry import PlaneHessian, Point3WithCov


@dataclass(frozen=True)
class MatchConfig:
    knn: int = 4
    pixel_radius: float = 60.0
    max_descriptor_distance: float = np.inf
    plane_min_overlap: float = 0.5
    plane_max_angle_deg: float = 10.0
    plane_max_d_diff: float = 100.0  # mm


@dataclass(frozen=True)
class PointMatch:
    prev: Point3WithCov
    curr: Point3WithCov
    descriptor_distance: float


@dataclass(frozen=True)
class PlaneMatch:
    prev: PlaneHessian
    curr: PlaneHessian
    overlap_fraction: float
    plane_distance: float


def match_points(prev_points: List[Point3WithCov],
                 curr_points: List[Point3WithCov],
                 config: MatchConfig = MatchConfig()) -> List[PointMatch]:
    """Descriptor k-NN with spatial gating and greedy one-to-one selection.

    For each current point the k nearest previous descriptors are
    examined; among those within the pixel radius the smallest descriptor
    distance wins. Candidates are then committed greedily in ascending
    descriptor distance so each side is used at most once.
    """
    if not prev_points or not curr_points:
        return []
    d_prev = np.stack([p.descriptor for p in prev_points])
    d_curr = np.stack([p.descriptor for p in curr_points])
    if d_prev.shape[1] != d_curr.shape[1]:
        raise ValueError("descriptor lengths differ between frames")
    px_prev = np.stack([p.pixel for p in prev_points])
    px_curr = np.stack([p.pixel for p in curr_points])

    dists = np.linalg.norm(d_curr[:, None, :] - d_prev[None, :, :], axis=2)
    k = min(config.knn, len(prev_points))
    nn = np.argpartition(dists, k - 1, axis=1)[:, :k]

    candidates = []
    for i in range(len(curr_points)):
        best_j, best_d = -1, np.inf
        for j in nn[i]:
            if np.linalg.norm(px_curr[i] - px_prev[j]) > config.pixel_radius:
                continue
            if dists[i, j] < best_d:
                best_j, best_d = int(j), float(dists[i, j])
        if best_j >= 0 and best_d <= config.max_descriptor_distance:
            candidates.append((best_d, i, best_j))
    candidates.sort()

    used_prev, used_curr, matches = set(), set(), []
    for dd, i, j in candidates:
        if i in used_curr or j in used_prev:
            continue
        used_curr.add(i)
        used_prev.add(j)
        matches.append(PointMatch(prev_points[j], curr_points[i], dd))
    return matches


def projection_overlap(mask_a, mask_b) -> float:
    """popcount(a AND b) / min(popcount(a), popcount(b))."""
    a = np.asarray(mask_a, dtype=bool)
    b = np.asarray(mask_b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError("masks must have the same length")
    ca, cb = int(a.sum()), int(b.sum())
    if ca == 0 or cb == 0:
        raise ValueError("masks must be non-empty")
    return int((a & b).sum()) / min(ca, cb)


def plane_to_plane_distance(a: PlaneHessian, b: PlaneHessian) -> float:
    """Distance between the planes' closest-to-origin points d*N."""
    return float(np.linalg.norm(b.d * b.normal - a.d * a.normal))


def match_planes(prev_planes: List[PlaneHessian],
                 curr_planes: List[PlaneHessian],
                 config: MatchConfig = MatchConfig()) -> List[PlaneMatch]:
    """Gated plane association minimizing the plane-to-plane distance.

    Candidates must overlap by at least plane_min_overlap of the smaller
    plane's inliers, agree in normal direction within plane_max_angle_deg
    and in distance within plane_max_d_diff. One-to-one is enforced with
    ties broken by smaller distance.
    """
    cos_min = np.cos(np.deg2rad(config.plane_max_angle_deg))
    candidates = []
    for i, cp in enumerate(curr_planes):
        for j, pp in enumerate(prev_planes):
            if cp.inlier_mask is None or pp.inlier_mask is None:
                overlap = 1.0
            else:
                overlap = projection_overlap(pp.inlier_mask, cp.inlier_mask)
            if overlap < config.plane_min_overlap:
                continue
            if float(pp.normal @ cp.normal) < cos_min:
                continue
            if abs(pp.d - cp.d) > config.plane_max_d_diff:
                continue
            candidates.append((plane_to_plane_distance(pp, cp), i, j, overlap))
    candidates.sort()
    used_prev, used_curr, matches = set(), set(), []
    for dist, i, j, overlap in candidates:
        if i in used_curr or j in used_prev:
            continue
        used_curr.add(i)
        used_prev.add(j)
        matches.append(PlaneMatch(prev_planes[j], curr_planes[i],
                                  overlap, dist))
    return matches
