"""Plane segmentation, RANSAC filtering and weighted least-squares fitting.

Segmentation is grid-based region growing over the organized cloud:
20x20 pixel cells are fitted individually, adjacent near-coplanar cells
are merged, and the merged regions are grown pixel-wise. Each segment is
then filtered with RANSAC and fitted in the minimal parameterization
theta_m = N/d by weighted least squares with weights 1/sigma_Z^2; the
fit covariance is the inverse normal-equation matrix.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import List, Optional

import numpy as np
from scipy import ndimage

from .backprojection import DepthImage, NoiseModel, backproject, depth_sigma
from .geometry import (CameraIntrinsics, PlaneHessian, PlaneMinimal,
                       canonicalize_plane)


class PlaneFitError(ValueError):
    """Degenerate plane fit: rank-deficient points or near-origin plane."""


class RansacError(ValueError):
    """RANSAC consensus below the acceptance fraction."""


@dataclass(frozen=True)
class PlaneExtractionConfig:
    cell_size: int = 20
    cell_rms_threshold: float = 20.0       # mm, per-cell planarity
    cell_min_fill: float = 0.8             # valid-pixel fraction per cell
    merge_angle_deg: float = 5.0
    merge_distance: float = 20.0           # mm, mutual point-to-plane
    grow_distance: float = 20.0            # mm, pixel-wise growing
    min_segment_size: int = 900            # pixels
    segment_rms_threshold: float = 20.0    # mm, final segment planarity
    ransac_iterations: int = 200
    ransac_threshold: float = 15.0         # mm, inlier distance
    ransac_confidence: float = 0.99
    min_inlier_fraction: float = 0.6
    ransac_score_subsample: int = 3000
    max_fit_points: int = 2000
    theta_norm_cap: float = 1.0            # 1/mm, rejects |d| < 1 mm


@dataclass(frozen=True)
class OrganizedCloud:
    """Pixel-aligned point grid: positions (H, W, 3) mm plus validity."""
    points: np.ndarray
    valid: np.ndarray
    depth: np.ndarray       # Z in mm, aligned with points
    intrinsics: CameraIntrinsics

    def __post_init__(self):
        if self.points.shape[:2] != self.valid.shape \
                or self.depth.shape != self.valid.shape:
            raise ValueError("grid shapes do not match")

    @property
    def shape(self):
        return self.valid.shape


def organized_cloud_from_depth(depth: DepthImage) -> OrganizedCloud:
    """Back-project every valid depth pixel onto the image grid."""
    intr = depth.intrinsics
    z = depth.depth_mm()
    valid = depth.valid_mask()
    h, w = z.shape
    u, v = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    zs = np.where(valid, z, 1.0)
    pts = np.stack([zs * (u - intr.cx) / intr.fx,
                    zs * (v - intr.cy) / intr.fy,
                    zs], axis=-1)
    pts[~valid] = 0.0
    return OrganizedCloud(pts, valid, np.where(valid, z, 0.0), intr)


@dataclass(frozen=True)
class PlaneSegment:
    """Candidate planar region: flat pixel indices plus inlier bitmask."""
    pixels: np.ndarray
    inlier_mask: np.ndarray

    def __post_init__(self):
        if int(self.inlier_mask.sum()) != len(self.pixels):
            raise ValueError("mask popcount does not match the pixel list")


def _segment_from_mask(mask):
    return PlaneSegment(np.flatnonzero(mask), mask.reshape(-1))


def _pca_plane(points):
    """Unweighted total least-squares plane: (unit normal, point on plane)."""
    c = points.mean(axis=0)
    q = points - c
    cov = q.T @ q / len(points)
    w, v = np.linalg.eigh(cov)
    return v[:, 0], c


def _cell_statistics(cloud: OrganizedCloud, cs: int):
    """Per-cell count, centroid and scatter eigen-decomposition."""
    h, w = cloud.shape
    nby, nbx = h // cs, w // cs
    hh, ww = nby * cs, nbx * cs
    val = cloud.valid[:hh, :ww].reshape(nby, cs, nbx, cs)
    pts = cloud.points[:hh, :ww].reshape(nby, cs, nbx, cs, 3)
    pts = np.where(val[..., None], pts, 0.0)
    count = val.sum(axis=(1, 3)).astype(float)
    s1 = pts.sum(axis=(1, 3))
    s2 = np.einsum("abcdi,abcdj->acij", pts, pts)
    safe = np.maximum(count, 1.0)
    centroid = s1 / safe[..., None]
    cov = s2 / safe[..., None, None] \
        - np.einsum("abi,abj->abij", centroid, centroid)
    eigval, eigvec = np.linalg.eigh(cov)
    return count, centroid, eigval, eigvec


class _UnionFind:
    def __init__(self, n):
        self.parent = list(range(n))

    def find(self, a):
        while self.parent[a] != a:
            self.parent[a] = self.parent[self.parent[a]]
            a = self.parent[a]
        return a

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[rb] = ra


def segment_planes(cloud: OrganizedCloud,
                   config: PlaneExtractionConfig = PlaneExtractionConfig()
                   ) -> List[PlaneSegment]:
    """Detect disjoint approximately-coplanar pixel regions.

    Returns segments ordered by decreasing size; each satisfies the
    minimum-size and RMS-planarity contract. Returns an empty list when
    nothing qualifies.
    """
    cs = config.cell_size
    h, w = cloud.shape
    nby, nbx = h // cs, w // cs
    if nby == 0 or nbx == 0 or not cloud.valid.any():
        return []
    count, centroid, eigval, eigvec = _cell_statistics(cloud, cs)

    planar = (count >= config.cell_min_fill * cs * cs) \
        & (np.sqrt(np.maximum(eigval[..., 0], 0.0))
           <= config.cell_rms_threshold)
    normals = eigvec[..., :, 0]
    # orient all cell normals to the same side (toward the camera)
    flip = np.einsum("abi,abi->ab", normals, centroid) > 0
    normals = np.where(flip[..., None], -normals, normals)

    uf = _UnionFind(nby * nbx)
    cos_min = np.cos(np.deg2rad(config.merge_angle_deg))
    for by in range(nby):
        for bx in range(nbx):
            if not planar[by, bx]:
                continue
            for dy, dx in ((0, 1), (1, 0)):
                ny, nx = by + dy, bx + dx
                if ny >= nby or nx >= nbx or not planar[ny, nx]:
                    continue
                if normals[by, bx] @ normals[ny, nx] < cos_min:
                    continue
                dc = centroid[ny, nx] - centroid[by, bx]
                if abs(normals[by, bx] @ dc) > config.merge_distance:
                    continue
                if abs(normals[ny, nx] @ dc) > config.merge_distance:
                    continue
                uf.union(by * nbx + bx, ny * nbx + nx)

    groups = {}
    for by in range(nby):
        for bx in range(nbx):
            if planar[by, bx]:
                groups.setdefault(uf.find(by * nbx + bx), []).append((by, bx))

    flat_pts = cloud.points.reshape(-1, 3)
    valid = cloud.valid
    candidates = []
    for cells in groups.values():
        seed = np.zeros((h, w), dtype=bool)
        npix = 0
        for by, bx in cells:
            block = valid[by * cs:(by + 1) * cs, bx * cs:(bx + 1) * cs]
            seed[by * cs:(by + 1) * cs, bx * cs:(bx + 1) * cs] = block
            npix += int(block.sum())
        if npix < config.min_segment_size:
            continue
        candidates.append((npix, seed))
    candidates.sort(key=lambda c: -c[0])

    # grow each seed region over the valid pixels near its fitted plane
    structure = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)
    regions, distances = [], []
    for _, seed in candidates:
        seed_idx = np.flatnonzero(seed.reshape(-1))
        sub = seed_idx[:: max(1, len(seed_idx) // 5000)]
        normal, origin = _pca_plane(flat_pts[sub])
        dist = np.abs((flat_pts - origin) @ normal).reshape(h, w)
        near = valid & (dist <= config.grow_distance)
        labels, nlab = ndimage.label(near, structure=structure)
        if nlab == 0:
            continue
        keep = np.unique(labels[seed & near])
        keep = keep[keep > 0]
        if len(keep) == 0:
            continue
        regions.append(np.isin(labels, keep))
        distances.append(dist)
    if not regions:
        return []

    # contested pixels (plane seams) go to the nearest plane; seed fits
    # can be slightly biased by seam pixels inside planar cells, so refit
    # each plane from the pixels it currently owns and reassign
    stack = np.stack(regions)
    dstack = np.stack(distances)
    dstack[~stack] = np.inf
    claimed = stack.any(axis=0)
    for _ in range(2):
        owner = np.argmin(dstack, axis=0)
        for k in range(len(regions)):
            ridx = np.flatnonzero((claimed & (owner == k)).reshape(-1))
            if len(ridx) < 3:
                continue
            sub = ridx[:: max(1, len(ridx) // 5000)]
            nk, ok = _pca_plane(flat_pts[sub])
            dk = np.abs((flat_pts - ok) @ nk).reshape(h, w)
            dstack[k] = np.where(stack[k], dk, np.inf)
    owner = np.argmin(dstack, axis=0)
    segments = []
    for k in range(len(regions)):
        region = regions[k] & (owner == k)
        if int(region.sum()) < config.min_segment_size:
            continue
        # final planarity contract on the grown region
        ridx = np.flatnonzero(region.reshape(-1))
        sub = ridx[:: max(1, len(ridx) // 5000)]
        n2, o2 = _pca_plane(flat_pts[sub])
        rms = np.sqrt(np.mean(((flat_pts[sub] - o2) @ n2) ** 2))
        if rms > config.segment_rms_threshold:
            continue
        segments.append(_segment_from_mask(region))
    segments.sort(key=lambda s: -len(s.pixels))
    return segments


def ransac_filter(segment: PlaneSegment, cloud: OrganizedCloud,
                  config: PlaneExtractionConfig = PlaneExtractionConfig(),
                  rng: Optional[np.random.Generator] = None) -> PlaneSegment:
    """Keep only segment pixels within the RANSAC inlier threshold.

    Raises RansacError when the best consensus is below
    min_inlier_fraction of the input segment.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    pixels = segment.pixels
    if len(pixels) < 3:
        raise RansacError("segment has fewer than 3 points")
    pts = cloud.points.reshape(-1, 3)[pixels]
    n_all = len(pts)
    sub = pts[:: max(1, n_all // config.ransac_score_subsample)]
    n_sub = len(sub)

    best_normal, best_origin, best_count = None, None, -1
    max_iter = config.ransac_iterations
    it = 0
    while it < max_iter:
        batch = min(32, max_iter - it)
        idx = rng.integers(0, n_sub, size=(batch, 3))
        p0, p1, p2 = sub[idx[:, 0]], sub[idx[:, 1]], sub[idx[:, 2]]
        nrm = np.cross(p1 - p0, p2 - p0)
        lens = np.linalg.norm(nrm, axis=1)
        ok = lens > 1e-9
        if ok.any():
            nrm = nrm[ok] / lens[ok, None]
            org = p0[ok]
            dist = np.einsum("kj,knj->kn", nrm,
                             sub[None, :, :] - org[:, None, :])
            counts = (np.abs(dist) <= config.ransac_threshold).sum(axis=1)
            k = int(np.argmax(counts))
            if counts[k] > best_count:
                best_count = int(counts[k])
                best_normal, best_origin = nrm[k], org[k]
        it += batch
        # adaptive termination at the requested confidence
        frac = max(best_count / n_sub, 1e-9)
        if frac >= 1.0:
            break
        needed = np.log(1.0 - config.ransac_confidence) \
            / np.log(max(1.0 - frac**3, 1e-12))
        if it >= needed:
            break

    if best_normal is None:
        raise RansacError("no valid minimal sample found")
    dist_all = np.abs((pts - best_origin) @ best_normal)
    inliers = dist_all <= config.ransac_threshold
    if int(inliers.sum()) < config.min_inlier_fraction * n_all:
        raise RansacError("consensus below the acceptance fraction")
    mask = np.zeros(cloud.valid.size, dtype=bool)
    mask[pixels[inliers]] = True
    return PlaneSegment(pixels[inliers], mask)


def fit_plane_wls(points, weights=None, inlier_count=None,
                  theta_norm_cap=1.0) -> PlaneMinimal:
    """Weighted least-squares fit of theta_m = N/d to 3D points (mm).

    Solves the 3x3 normal equations A theta = b with
    A = sum_i w_i P_i P_i^T and b = -sum_i w_i P_i; the covariance of
    theta_m is A^{-1}. Weights default to 1. Raises PlaneFitError for
    rank-deficient configurations or planes closer than 1/theta_norm_cap
    mm to the origin.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) < 3:
        raise PlaneFitError("need at least 3 points of dimension 3")
    w = np.ones(len(pts)) if weights is None else np.asarray(weights, float)
    a = (pts * w[:, None]).T @ pts
    b = -(w @ pts)
    cond = np.linalg.cond(a)
    if not np.isfinite(cond) or cond > 1e12:
        raise PlaneFitError("rank-deficient point configuration")
    theta = np.linalg.solve(a, b)
    norm = np.linalg.norm(theta)
    if norm > theta_norm_cap:
        raise PlaneFitError("plane passes too close to the origin")
    cov = np.linalg.inv(a)
    return PlaneMinimal(theta, 0.5 * (cov + cov.T),
                        inlier_count=inlier_count or len(pts))


def to_hessian(plane: PlaneMinimal, inlier_mask=None,
               inlier_count=None) -> PlaneHessian:
    """Recover {N, d} plus 4x4 covariance from the minimal form.

    The raw mapping is theta = [theta_m, 1] / ||theta_m||; the result is
    canonicalized to d < 0 by flipping {N, d} jointly, which leaves
    theta_m = N/d unchanged.
    """
    th = plane.theta_m
    n = np.linalg.norm(th)
    if n == 0.0:
        raise PlaneFitError("theta_m must be nonzero")
    normal, d = canonicalize_plane(th / n, 1.0 / n)
    # Jacobian of theta_m -> (N, d) including the sign flip
    j = np.zeros((4, 3))
    j[:3, :] = np.eye(3) / n - np.outer(th, th) / n**3
    j[3, :] = -th / n**3
    if d * (1.0 / n) < 0:  # a flip was applied
        j = -j
    cov = j @ plane.covariance @ j.T
    cov = 0.5 * (cov + cov.T)
    count = inlier_count if inlier_count is not None else plane.inlier_count
    return PlaneHessian(normal, d, covariance=cov,
                        inlier_mask=inlier_mask, inlier_count=count)


def extract_planes(cloud: OrganizedCloud, noise: NoiseModel,
                   config: PlaneExtractionConfig = PlaneExtractionConfig(),
                   rng: Optional[np.random.Generator] = None
                   ) -> List[PlaneHessian]:
    """Full per-frame pipeline: segment, RANSAC-filter, fit, convert.

    Segments that fail RANSAC consensus or yield a degenerate fit are
    dropped. The returned planes carry inlier bitmasks recomputed against
    the fitted plane so that every masked point is within the RANSAC
    threshold of it.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    flat_pts = cloud.points.reshape(-1, 3)
    flat_z = cloud.depth.reshape(-1)
    planes = []
    for seg in segment_planes(cloud, config):
        try:
            seg = ransac_filter(seg, cloud, config, rng)
        except RansacError:
            continue
        pixels = seg.pixels
        step = max(1, len(pixels) // config.max_fit_points)
        sel = pixels[::step]
        pts = flat_pts[sel]
        w = 1.0 / depth_sigma(flat_z[sel], noise) ** 2
        try:
            pm = fit_plane_wls(pts, w)
        except PlaneFitError:
            continue
        ph = to_hessian(pm)
        resid = np.abs(flat_pts[pixels] @ ph.normal + ph.d)
        keep = pixels[resid <= config.ransac_threshold]
        if len(keep) < config.min_segment_size:
            continue
        mask = np.zeros(cloud.valid.size, dtype=bool)
        mask[keep] = True
        planes.append(replace(ph, inlier_mask=mask, inlier_count=len(keep)))
    planes.sort(key=lambda p: -p.inlier_count)
    return planes
