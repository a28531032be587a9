"""Synthetic RGB-D scene generation and Monte-Carlo covariance oracles.

Scenes are collections of bounded planes and identified 3D landmarks
observed along a known trajectory. Depth is rendered by exact
ray-casting; when enabled, Gaussian depth noise with the quadratic
structured-light std is injected per pixel. All randomness is driven by
explicit generators so identical seeds reproduce identical data.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Tuple

import numpy as np

from .backprojection import (DepthImage, MAX_VALID_DEPTH_MM,
                             MIN_VALID_DEPTH_MM, NoiseModel, depth_sigma)
from .geometry import CameraIntrinsics, PoseSE3, se3_apply, se3_exp


@dataclass(frozen=True)
class BoundedPlane:
    """Rectangular planar patch: center, unit normal, in-plane u axis,
    and half extents along u and v = normal x u (mm)."""
    center: np.ndarray
    normal: np.ndarray
    u_axis: np.ndarray
    half_u: float
    half_v: float

    def __post_init__(self):
        c = np.asarray(self.center, dtype=float)
        n = np.asarray(self.normal, dtype=float)
        u = np.asarray(self.u_axis, dtype=float)
        n = n / np.linalg.norm(n)
        u = u - (u @ n) * n
        u = u / np.linalg.norm(u)
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "u_axis", u)

    @property
    def v_axis(self):
        return np.cross(self.normal, self.u_axis)

    def hessian(self) -> Tuple[np.ndarray, float]:
        """World-frame plane equation (N, d) with N.P + d = 0."""
        return self.normal, -float(self.normal @ self.center)


@dataclass(frozen=True)
class SyntheticScene:
    planes: Tuple[BoundedPlane, ...]
    landmarks: np.ndarray                    # (N, 3) world mm
    intrinsics: CameraIntrinsics
    noise: NoiseModel = NoiseModel()
    noise_enabled: bool = False
    trajectory: Tuple[Tuple[float, PoseSE3], ...] = ()

    def with_noise(self, enabled: bool) -> "SyntheticScene":
        return replace(self, noise_enabled=enabled)


def render_depth(scene: SyntheticScene, pose_world_cam: PoseSE3,
                 rng: Optional[np.random.Generator] = None,
                 timestamp: float = 0.0) -> DepthImage:
    """Exact ray-cast depth of the nearest bounded plane per pixel.

    Gaussian depth noise with std depth_sigma(Z) is added when the scene
    enables it and an rng is supplied. Pixels hitting nothing (or outside
    the sensor working range) are zero.
    """
    intr = scene.intrinsics
    h, w = intr.height, intr.width
    u, v = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    dirs = np.stack([(u - intr.cx) / intr.fx,
                     (v - intr.cy) / intr.fy,
                     np.ones_like(u)], axis=-1)
    inv = pose_world_cam.inverse()
    z_best = np.full((h, w), np.inf)
    for plane in scene.planes:
        n_w, d_w = plane.hessian()
        n_c = inv.rotation @ n_w
        d_c = d_w + float(n_w @ pose_world_cam.translation)
        denom = dirs @ n_c
        with np.errstate(divide="ignore", invalid="ignore"):
            z = -d_c / denom
        hit = (np.abs(denom) > 1e-12) & (z > 0)
        zf = np.where(hit, z, 1.0)
        pts_c = dirs * zf[..., None]
        pts_w = pts_c @ pose_world_cam.rotation.T + pose_world_cam.translation
        rel = pts_w - plane.center
        hit &= np.abs(rel @ plane.u_axis) <= plane.half_u
        hit &= np.abs(rel @ plane.v_axis) <= plane.half_v
        z_best = np.where(hit & (z < z_best), z, z_best)
    depth = np.where(np.isfinite(z_best), z_best, 0.0)
    if scene.noise_enabled and rng is not None:
        valid = depth > 0
        noisy = depth.copy()
        noisy[valid] += rng.normal(size=int(valid.sum())) \
            * depth_sigma(depth[valid], scene.noise)
        depth = noisy
    depth[(depth < MIN_VALID_DEPTH_MM) | (depth > MAX_VALID_DEPTH_MM)] = 0.0
    # synthetic frames use depth_scale 1: raw units are millimetres
    intr_mm = replace(intr, depth_scale=1.0)
    return DepthImage(depth, intr_mm, timestamp)


def monte_carlo_cov(draw: Callable[[np.random.Generator], np.ndarray],
                    func: Callable[[np.ndarray], np.ndarray],
                    samples: int,
                    rng: np.random.Generator) -> np.ndarray:
    """Empirical covariance of func(draw(rng)) over repeated samples."""
    if samples < 1000:
        raise ValueError("need at least 1000 samples")
    out = np.stack([np.asarray(func(draw(rng)), dtype=float)
                    for _ in range(samples)])
    return np.cov(out.T, ddof=1)


def sinusoidal_trajectory(n_frames: int,
                          translation_amplitude: float = 80.0,
                          rotation_amplitude: float = 0.05,
                          fps: float = 30.0
                          ) -> Tuple[Tuple[float, PoseSE3], ...]:
    """Smooth 6-DoF camera motion: per-axis sinusoids of distinct
    frequencies and phases, evaluated at fps; pose 0 is the identity."""
    freqs = np.array([0.23, 0.31, 0.17, 0.19, 0.29, 0.13])
    phases = np.array([0.0, 1.1, 2.3, 0.7, 1.9, 2.9])
    amps = np.array([translation_amplitude] * 3 + [rotation_amplitude] * 3)
    out = []
    for i in range(n_frames):
        t = i / fps
        twist = amps * (np.sin(2 * np.pi * freqs * t + phases)
                        - np.sin(phases))
        out.append((t, se3_exp(twist)))
    return tuple(out)


def _orthonormal_u(normal):
    n = np.asarray(normal, dtype=float)
    ref = np.array([1.0, 0.0, 0.0])
    if abs(n @ ref) > 0.9:
        ref = np.array([0.0, 1.0, 0.0])
    u = np.cross(n, ref)
    return u / np.linalg.norm(u)


def _corner_planes(distance=2000.0, half=700.0):
    """Three mutually orthogonal patches meeting at a point straight
    ahead, like looking into a box corner."""
    apex = np.array([0.0, 0.0, distance])
    # rotate the (1,1,1)/sqrt(3) direction onto -z
    target = np.array([0.0, 0.0, -1.0])
    src = np.ones(3) / np.sqrt(3.0)
    vaxis = np.cross(src, target)
    s = np.linalg.norm(vaxis)
    c = float(src @ target)
    vx = np.array([[0, -vaxis[2], vaxis[1]],
                   [vaxis[2], 0, -vaxis[0]],
                   [-vaxis[1], vaxis[0], 0]])
    rot = np.eye(3) + vx + vx @ vx * ((1 - c) / s**2)
    axes = [rot @ e for e in np.eye(3)]
    planes = []
    for k in range(3):
        n = axes[k]
        u = axes[(k + 1) % 3]
        v = axes[(k + 2) % 3]
        # square face spanning [0, 2*half] along +u and +v from the apex
        center = apex + half * (u + v)
        planes.append(BoundedPlane(center, n, u, half, half))
    return planes


def _scatter_on_plane(plane: BoundedPlane, count: int,
                      rng: np.random.Generator):
    a = rng.uniform(-plane.half_u, plane.half_u, size=count)
    b = rng.uniform(-plane.half_v, plane.half_v, size=count)
    return plane.center + a[:, None] * plane.u_axis \
        + b[:, None] * plane.v_axis


DEFAULT_INTRINSICS = CameraIntrinsics(fx=250.0, fy=250.0, cx=159.5,
                                      cy=119.5, width=320, height=240,
                                      depth_scale=1.0)

FIXTURE_NAMES = ("corner3", "wall_points", "notexture")


def make_fixture(name: str, n_frames: int = 100, noise: bool = False,
                 seed: int = 0,
                 translation_amplitude: float = 60.0,
                 rotation_amplitude: float = 0.03) -> SyntheticScene:
    """Canonical test scenes.

    corner3:     three orthogonal planes meeting 2 m ahead, no landmarks.
    wall_points: a tilted wall around 2 m with 200 landmarks on it.
    notexture:   three oblique planes, zero landmarks.
    """
    rng = np.random.default_rng(seed)
    traj = sinusoidal_trajectory(n_frames, translation_amplitude,
                                 rotation_amplitude)
    if name == "corner3":
        planes = _corner_planes()
        landmarks = np.zeros((0, 3))
    elif name == "wall_points":
        wall = BoundedPlane(np.array([0.0, 0.0, 2000.0]),
                            np.array([0.35, 0.15, -1.0]),
                            np.array([1.0, 0.0, 0.0]),
                            1400.0, 1100.0)
        planes = [wall]
        landmarks = _scatter_on_plane(wall, 200, rng)
    elif name == "notexture":
        p1 = BoundedPlane(np.array([0.0, 0.0, 2400.0]),
                          np.array([0.25, 0.1, -1.0]),
                          np.array([1.0, 0.0, 0.0]), 1000.0, 900.0)
        p2 = BoundedPlane(np.array([-900.0, 0.0, 1900.0]),
                          np.array([1.0, 0.05, -0.35]),
                          np.array([0.0, 1.0, 0.0]), 900.0, 800.0)
        p3 = BoundedPlane(np.array([300.0, 800.0, 2000.0]),
                          np.array([-0.1, -1.0, -0.45]),
                          np.array([1.0, 0.0, 0.0]), 900.0, 700.0)
        planes = [p1, p2, p3]
        landmarks = np.zeros((0, 3))
    else:
        raise ValueError(f"unknown fixture {name!r}; "
                         f"choose from {FIXTURE_NAMES}")
    return SyntheticScene(tuple(planes), landmarks, DEFAULT_INTRINSICS,
                          NoiseModel(), noise, traj)


def save_scene(scene: SyntheticScene, path):
    """Plain-text scene file: one typed record per line."""
    with open(path, "w") as f:
        i = scene.intrinsics
        f.write(f"intrinsics {i.fx!r} {i.fy!r} {i.cx!r} {i.cy!r} "
                f"{i.width} {i.height} {i.depth_scale!r}\n")
        f.write(f"noise {scene.noise.sigma_p!r} "
                f"{scene.noise.depth_sigma_coeff!r} "
                f"{int(scene.noise_enabled)}\n")
        for p in scene.planes:
            vals = list(p.center) + list(p.normal) + list(p.u_axis) \
                + [p.half_u, p.half_v]
            f.write("plane " + " ".join(repr(float(x)) for x in vals) + "\n")
        for lm in scene.landmarks:
            f.write("landmark " + " ".join(repr(float(x)) for x in lm) + "\n")
        for t, pose in scene.trajectory:
            from .geometry import se3_log
            tw = se3_log(pose)
            f.write(f"pose {t!r} "
                    + " ".join(repr(float(x)) for x in tw) + "\n")


def load_scene(path) -> SyntheticScene:
    intr = None
    noise = NoiseModel()
    noise_enabled = False
    planes, landmarks, traj = [], [], []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            kind, *rest = line.split()
            vals = [float(x) for x in rest]
            if kind == "intrinsics":
                intr = CameraIntrinsics(vals[0], vals[1], vals[2], vals[3],
                                        int(vals[4]), int(vals[5]), vals[6])
            elif kind == "noise":
                noise = NoiseModel(vals[0], vals[1])
                noise_enabled = bool(int(vals[2]))
            elif kind == "plane":
                planes.append(BoundedPlane(np.array(vals[0:3]),
                                           np.array(vals[3:6]),
                                           np.array(vals[6:9]),
                                           vals[9], vals[10]))
            elif kind == "landmark":
                landmarks.append(vals[0:3])
            elif kind == "pose":
                traj.append((vals[0], se3_exp(np.array(vals[1:7]))))
            else:
                raise ValueError(f"{path}:{lineno}: unknown record {kind!r}")
    if intr is None:
        raise ValueError(f"{path}: missing intrinsics record")
    lms = np.array(landmarks) if landmarks else np.zeros((0, 3))
    return SyntheticScene(tuple(planes), lms, intr, noise, noise_enabled,
                          tuple(traj))
