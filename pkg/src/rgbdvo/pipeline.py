"""Frame construction and the sequential odometry loop.

A Frame bundles one RGB-D observation: extracted planes with inlier
masks, and keypoints back-projected to 3D points with propagated
covariance. The odometry loop matches consecutive frames, solves for the
relative pose, and chains camera-to-world poses in the first frame's
coordinate system.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Tuple

import numpy as np

from .backprojection import (DepthImage, MAX_VALID_DEPTH_MM,
                             MIN_VALID_DEPTH_MM, NoiseModel,
                             backproject_with_cov, depth_sigma)
from .dataset import (SequenceManifest, TrajectoryEstimate, load_depth_png,
                      load_grayscale, load_sequence)
from .features import (FeatureConfig, Keypoint, detect_and_describe,
                       landmark_keypoints, load_keypoints)
from .geometry import CameraIntrinsics, PlaneHessian, Point3WithCov, PoseSE3, se3_log
from .matching import MatchConfig, match_planes, match_points
from .planes import (OrganizedCloud, PlaneExtractionConfig, extract_planes,
                     organized_cloud_from_depth)
from .solver import FALLBACK_NONE, SolverConfig, SolverReport, solve_pose
from .synthetic import SyntheticScene, render_depth

MODE_POINTS_ONLY = "points_only"
MODE_PLANES_ONLY = "planes_only"
MODE_POINTS_AND_PLANES = "points_and_planes"
MODES = (MODE_POINTS_ONLY, MODE_PLANES_ONLY, MODE_POINTS_AND_PLANES)


@dataclass(frozen=True)
class RunConfig:
    mode: str = MODE_POINTS_AND_PLANES
    weighting: str = "probabilistic"     # or "deterministic"
    alpha: float = 10.0
    seed: int = 0
    noise_model: NoiseModel = NoiseModel()
    features: FeatureConfig = FeatureConfig()
    plane_extraction: PlaneExtractionConfig = PlaneExtractionConfig()
    matching: MatchConfig = MatchConfig()
    solver: SolverConfig = SolverConfig()

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.weighting not in ("probabilistic", "deterministic"):
            raise ValueError(f"unknown weighting {self.weighting!r}")

    def solver_config(self) -> SolverConfig:
        from dataclasses import replace
        return replace(self.solver, alpha=self.alpha,
                       probabilistic=self.weighting == "probabilistic")


@dataclass(frozen=True)
class Frame:
    timestamp: float
    intrinsics: CameraIntrinsics
    points: Tuple[Point3WithCov, ...]
    planes: Tuple[PlaneHessian, ...]
    label_shape: Tuple[int, int] = (0, 0)


def _depth_at(depth_mm, valid, pixel):
    u = int(round(float(pixel[0])))
    v = int(round(float(pixel[1])))
    h, w = depth_mm.shape
    if not (0 <= u < w and 0 <= v < h) or not valid[v, u]:
        return None
    return float(depth_mm[v, u])


def build_frame(depth: DepthImage, config: RunConfig,
                rng: np.random.Generator,
                gray: Optional[np.ndarray] = None,
                keypoints: Optional[List[Keypoint]] = None,
                keypoint_depths: Optional[np.ndarray] = None) -> Frame:
    """Extract planes and 3D points from one observation.

    Keypoints may be supplied directly (synthetic injection or sidecar
    files, optionally with exact depths); otherwise they are detected on
    the grayscale image. Keypoints without valid depth are dropped.
    """
    intr = depth.intrinsics
    planes: Tuple[PlaneHessian, ...] = ()
    if config.mode != MODE_POINTS_ONLY:
        cloud = organized_cloud_from_depth(depth)
        planes = tuple(extract_planes(cloud, config.noise_model,
                                      config.plane_extraction, rng))
    points: List[Point3WithCov] = []
    if config.mode != MODE_PLANES_ONLY:
        if keypoints is None and gray is not None:
            keypoints = detect_and_describe(gray, config.features)
        if keypoints:
            depth_mm = depth.depth_mm()
            valid = depth.valid_mask()
            for i, kp in enumerate(keypoints):
                if keypoint_depths is not None:
                    z = float(keypoint_depths[i])
                    if not MIN_VALID_DEPTH_MM <= z <= MAX_VALID_DEPTH_MM:
                        continue
                else:
                    z = _depth_at(depth_mm, valid, kp.pixel)
                    if z is None:
                        continue
                points.append(backproject_with_cov(
                    kp.pixel, z, intr, config.noise_model,
                    descriptor=kp.descriptor))
    return Frame(depth.timestamp, intr, tuple(points), planes,
                 (intr.height, intr.width))


@dataclass(frozen=True)
class StepDiagnostics:
    frame_index: int
    timestamp: float
    n_point_matches: int
    n_plane_matches: int
    iterations: int
    fallback: str
    cost: float


def run_odometry_frames(frames: Iterable[Frame],
                        config: RunConfig) -> TrajectoryEstimate:
    """Sequential frame-to-frame odometry over prepared frames.

    Returns camera poses in the first frame's coordinate system; per-step
    solver reports ride along for diagnostics.
    """
    solver_cfg = config.solver_config()
    timestamps, poses, reports = [], [], []
    prev_frame = None
    pose_acc = PoseSE3.identity()
    prior_twist = np.zeros(6)
    for frame in frames:
        if prev_frame is None:
            timestamps.append(frame.timestamp)
            poses.append(pose_acc)
            prev_frame = frame
            continue
        pmatches = match_points(list(prev_frame.points), list(frame.points),
                                config.matching) \
            if config.mode != MODE_PLANES_ONLY else []
        cmatches = match_planes(list(prev_frame.planes), list(frame.planes),
                                config.matching) \
            if config.mode != MODE_POINTS_ONLY else []
        report = solve_pose(pmatches, cmatches, prior_twist, solver_cfg)
        rel = report.pose  # maps previous-frame coords to current-frame
        pose_acc = pose_acc.compose(rel.inverse())
        if report.fallback_used == FALLBACK_NONE:
            prior_twist = se3_log(rel)
        else:
            prior_twist = solver_cfg.velocity_decay * prior_twist
        timestamps.append(frame.timestamp)
        poses.append(PoseSE3(pose_acc.rotation, pose_acc.translation))
        reports.append(report)
        prev_frame = frame
    return TrajectoryEstimate(tuple(timestamps), tuple(poses),
                              tuple(reports))


def synthetic_frames(scene: SyntheticScene, config: RunConfig,
                     rng: np.random.Generator,
                     n_frames: Optional[int] = None) -> Iterable[Frame]:
    """Render and assemble frames along the scene trajectory.

    Landmark keypoints are injected with the scene's pixel/depth noise
    when enabled; descriptors carry landmark identities.
    """
    traj = scene.trajectory[:n_frames] if n_frames else scene.trajectory
    for t, pose in traj:
        depth = render_depth(scene, pose,
                             rng if scene.noise_enabled else None,
                             timestamp=t)
        kps, zs = None, None
        if len(scene.landmarks) and config.mode != MODE_PLANES_ONLY:
            sigma = scene.noise.sigma_p if scene.noise_enabled else 0.0
            kps, zs = landmark_keypoints(scene.landmarks, pose,
                                         scene.intrinsics, sigma, rng)
            zs = np.asarray(zs, dtype=float)
            if scene.noise_enabled:
                zs = zs + rng.normal(size=zs.shape) \
                    * depth_sigma(zs, scene.noise)
        yield build_frame(depth, config, rng, keypoints=kps,
                          keypoint_depths=zs)


def run_synthetic(scene: SyntheticScene, config: RunConfig,
                  n_frames: Optional[int] = None) -> TrajectoryEstimate:
    rng = np.random.default_rng(config.seed)
    return run_odometry_frames(synthetic_frames(scene, config, rng, n_frames),
                               config)


def scene_groundtruth(scene: SyntheticScene):
    """Trajectory ground truth in the first frame's coordinate system."""
    t0, p0 = scene.trajectory[0]
    return [(t, p0.inverse().compose(p)) for t, p in scene.trajectory]


def tum_frames(manifest: SequenceManifest, config: RunConfig,
               intrinsics: CameraIntrinsics, rng: np.random.Generator,
               n_frames: Optional[int] = None,
               use_sidecar: bool = False) -> Iterable[Frame]:
    pairs = manifest.association[:n_frames] if n_frames \
        else manifest.association
    for t_rgb, rgb_path, t_depth, depth_path in pairs:
        depth = load_depth_png(depth_path, intrinsics, timestamp=t_rgb)
        kps = None
        gray = None
        if config.mode != MODE_PLANES_ONLY:
            feat_path = rgb_path + ".feat"
            import os
            if use_sidecar and os.path.exists(feat_path):
                kps = load_keypoints(feat_path)
            else:
                gray = load_grayscale(rgb_path)
        yield build_frame(depth, config, rng, gray=gray, keypoints=kps)


def run_tum(directory, config: RunConfig,
            intrinsics: CameraIntrinsics = None,
            n_frames: Optional[int] = None):
    """Run odometry over a TUM sequence directory.

    Returns (trajectory, manifest)."""
    from .dataset import TUM_DEFAULT_INTRINSICS
    if intrinsics is None:
        intrinsics = TUM_DEFAULT_INTRINSICS
    manifest = load_sequence(directory)
    rng = np.random.default_rng(config.seed)
    traj = run_odometry_frames(
        tum_frames(manifest, config, intrinsics, rng, n_frames,
                   use_sidecar=True), config)
    return traj, manifest


def diagnostics_rows(traj: TrajectoryEstimate) -> List[StepDiagnostics]:
    rows = []
    for i, report in enumerate(traj.reports):
        rows.append(StepDiagnostics(i + 1, traj.timestamps[i + 1],
                                    report.point_match_count,
                                    report.plane_match_count,
                                    report.iterations,
                                    report.fallback_used,
                                    report.final_cost))
    return rows


def write_diagnostics(path, traj: TrajectoryEstimate):
    """Fixed-column CSV of per-step solver diagnostics."""
    with open(path, "w") as f:
        f.write("frame_index,timestamp,n_point_matches,n_plane_matches,"
                "iterations,fallback,cost\n")
        for row in diagnostics_rows(traj):
            f.write("%d,%.6f,%d,%d,%d,%s,%.9g\n"
                    % (row.frame_index, row.timestamp, row.n_point_matches,
                       row.n_plane_matches, row.iterations, row.fallback,
                       row.cost))
