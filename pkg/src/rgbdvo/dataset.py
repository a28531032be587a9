"""TUM-format RGB-D sequence ingestion, trajectory I/O, and the
relative pose error metric.

Files use the TUM conventions: "# comment" lines, whitespace-separated
"timestamp value..." records, 16-bit PNG depth at 5000 raw units per
metre, and trajectories as "timestamp tx ty tz qx qy qz qw" in metres.
Internally everything is millimetres; conversion happens only here.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .backprojection import DepthImage
from .geometry import CameraIntrinsics, PoseSE3

ASSOCIATION_TOLERANCE_S = 0.02

# fr1/fr3 Kinect calibration shipped with the benchmark
TUM_DEFAULT_INTRINSICS = CameraIntrinsics(fx=525.0, fy=525.0, cx=319.5,
                                          cy=239.5, width=640, height=480,
                                          depth_scale=0.2)


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class SequenceManifest:
    rgb: Tuple[Tuple[float, str], ...]
    depth: Tuple[Tuple[float, str], ...]
    groundtruth: Tuple[Tuple[float, PoseSE3], ...]
    association: Tuple[Tuple[float, str, float, str], ...]  # (t_rgb, rgb, t_depth, depth)
    dropped: int = 0


@dataclass(frozen=True)
class TrajectoryEstimate:
    """Timestamped pose chain in the first frame's coordinate system."""
    timestamps: Tuple[float, ...]
    poses: Tuple[PoseSE3, ...]
    reports: Tuple = ()

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=float)
        if len(ts) > 1 and not np.all(np.diff(ts) > 0):
            raise ValueError("timestamps must be strictly increasing")


def _parse_records(path, n_values=None):
    if not os.path.exists(path):
        raise DatasetFormatError(f"missing file: {path}")
    records = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            try:
                t = float(parts[0])
            except ValueError as exc:
                raise DatasetFormatError(
                    f"{path}:{lineno}: bad timestamp {parts[0]!r}") from exc
            if n_values is not None and len(parts) - 1 != n_values:
                raise DatasetFormatError(
                    f"{path}:{lineno}: expected {n_values} values")
            records.append((t, parts[1:]))
    return records


def quat_to_rot(q):
    """Rotation matrix from a quaternion (qx, qy, qz, qw)."""
    x, y, z, w = np.asarray(q, dtype=float)
    n = np.sqrt(x * x + y * y + z * z + w * w)
    if abs(n - 1.0) > 1e-6:
        raise DatasetFormatError("quaternion is not unit norm")
    x, y, z, w = x / n, y / n, z / n, w / n
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def rot_to_quat(r):
    """Quaternion (qx, qy, qz, qw) from a rotation matrix."""
    r = np.asarray(r, dtype=float)
    tr = np.trace(r)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        w = 0.25 * s
        x = (r[2, 1] - r[1, 2]) / s
        y = (r[0, 2] - r[2, 0]) / s
        z = (r[1, 0] - r[0, 1]) / s
    else:
        k = int(np.argmax(np.diag(r)))
        i, j = (k + 1) % 3, (k + 2) % 3
        s = np.sqrt(r[k, k] - r[i, i] - r[j, j] + 1.0) * 2
        q = np.zeros(4)
        q[k] = 0.25 * s
        q[3] = (r[j, i] - r[i, j]) / s
        q[i] = (r[i, k] + r[k, i]) / s
        q[j] = (r[j, k] + r[k, j]) / s
        x, y, z, w = q
    q = np.array([x, y, z, w])
    if w < 0:
        q = -q
    return q / np.linalg.norm(q)


def load_sequence(directory) -> SequenceManifest:
    """Parse rgb.txt/depth.txt (and groundtruth.txt when present) and
    associate rgb/depth by nearest timestamp within 20 ms."""
    rgb = [(t, os.path.join(directory, v[0]))
           for t, v in _parse_records(os.path.join(directory, "rgb.txt"), 1)]
    depth = [(t, os.path.join(directory, v[0]))
             for t, v in _parse_records(os.path.join(directory, "depth.txt"), 1)]
    gt_path = os.path.join(directory, "groundtruth.txt")
    groundtruth = []
    if os.path.exists(gt_path):
        for t, vals in _parse_records(gt_path, 7):
            v = [float(x) for x in vals]
            pose = PoseSE3(quat_to_rot(v[3:7]), 1000.0 * np.array(v[:3]))
            groundtruth.append((t, pose))

    depth_ts = np.array([t for t, _ in depth])
    association = []
    used = set()
    dropped = 0
    for t, path in rgb:
        if len(depth_ts) == 0:
            dropped += 1
            continue
        order = np.argsort(np.abs(depth_ts - t))
        chosen = None
        for k in order[:4]:
            if abs(depth_ts[k] - t) > ASSOCIATION_TOLERANCE_S:
                break
            if int(k) not in used:
                chosen = int(k)
                break
        if chosen is None:
            dropped += 1
            continue
        used.add(chosen)
        association.append((t, path, depth[chosen][0], depth[chosen][1]))
    return SequenceManifest(tuple(rgb), tuple(depth), tuple(groundtruth),
                            tuple(association), dropped)


def load_depth_png(path, intrinsics: CameraIntrinsics,
                   timestamp: float = 0.0) -> DepthImage:
    """16-bit single-channel PNG to a DepthImage (raw sensor units)."""
    img = Image.open(path)
    if img.mode not in ("I", "I;16", "I;16B"):
        raise DatasetFormatError(
            f"{path}: expected a 16-bit single-channel PNG, got {img.mode}")
    data = np.asarray(img)
    if data.ndim != 2:
        raise DatasetFormatError(f"{path}: depth image must be single-channel")
    return DepthImage(data, intrinsics, timestamp)


def load_grayscale(path):
    """RGB file as a float grayscale array in [0, 1]."""
    return np.asarray(Image.open(path).convert("L"), dtype=float) / 255.0


def write_trajectory(traj: TrajectoryEstimate, path):
    """TUM trajectory format, translations in metres, 6 decimals."""
    with open(path, "w") as f:
        for t, pose in zip(traj.timestamps, traj.poses):
            q = rot_to_quat(pose.rotation)
            tr = pose.translation / 1000.0
            f.write("%.6f %.6f %.6f %.6f %.6f %.6f %.6f %.6f\n"
                    % (t, tr[0], tr[1], tr[2], q[0], q[1], q[2], q[3]))


def read_trajectory(path) -> TrajectoryEstimate:
    ts, poses = [], []
    for t, vals in _parse_records(path, 7):
        v = [float(x) for x in vals]
        ts.append(t)
        poses.append(PoseSE3(quat_to_rot(v[3:7]), 1000.0 * np.array(v[:3])))
    return TrajectoryEstimate(tuple(ts), tuple(poses))


class InsufficientOverlapError(ValueError):
    pass


def _nearest_pose(timestamps, poses, t, tol=ASSOCIATION_TOLERANCE_S):
    k = int(np.argmin(np.abs(timestamps - t)))
    if abs(timestamps[k] - t) > tol:
        return None
    return poses[k]


def relative_pose_error(estimate: TrajectoryEstimate,
                        groundtruth: Sequence[Tuple[float, PoseSE3]],
                        interval: float = 1.0) -> Tuple[float, float]:
    """RPE over the given interval: (translational RMSE in metres,
    rotational RMSE in degrees).

    Every estimate timestamp with a valid endpoint inside the trajectory
    is used (dense evaluation); ground truth is looked up by nearest
    timestamp within 20 ms.
    """
    ts = np.asarray(estimate.timestamps, dtype=float)
    gt_ts = np.array([t for t, _ in groundtruth])
    gt_poses = [p for _, p in groundtruth]
    trans_sq, rot_sq = [], []
    for i, t0 in enumerate(ts):
        t1 = t0 + interval
        j = int(np.argmin(np.abs(ts - t1)))
        if abs(ts[j] - t1) > ASSOCIATION_TOLERANCE_S:
            continue
        q0 = _nearest_pose(gt_ts, gt_poses, t0)
        q1 = _nearest_pose(gt_ts, gt_poses, ts[j])
        if q0 is None or q1 is None:
            continue
        p_rel = estimate.poses[i].inverse().compose(estimate.poses[j])
        q_rel = q0.inverse().compose(q1)
        err = q_rel.inverse().compose(p_rel)
        trans_sq.append(float(err.translation @ err.translation))
        angle = np.arccos(np.clip((np.trace(err.rotation) - 1) / 2, -1, 1))
        rot_sq.append(float(angle) ** 2)
    if len(trans_sq) < 1:
        raise InsufficientOverlapError(
            "no estimate/ground-truth pairs overlap at the given interval")
    trans_rmse_m = float(np.sqrt(np.mean(trans_sq))) / 1000.0
    rot_rmse_deg = float(np.rad2deg(np.sqrt(np.mean(rot_sq))))
    return trans_rmse_m, rot_rmse_deg


def write_rpe_report(path, trans_rmse_m, rot_rmse_deg, interval=1.0):
    """Headered text table: one "metric value unit" row per line."""
    with open(path, "w") as f:
        f.write("metric value unit\n")
        f.write("interval %.3f s\n" % interval)
        f.write("rpe_translational_rmse %.6f m\n" % trans_rmse_m)
        f.write("rpe_rotational_rmse %.6f deg\n" % rot_rmse_deg)
