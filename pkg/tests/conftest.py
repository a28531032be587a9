"""Shared helpers for randomized geometric tests."""
import numpy as np
import pytest

from rgbdvo.geometry import PlaneHessian, PoseSE3, canonicalize_plane, se3_exp


def random_pose(rng, trans_scale=100.0, rot_scale=0.5) -> PoseSE3:
    twist = np.concatenate([rng.normal(0.0, trans_scale, 3),
                            rng.normal(0.0, rot_scale, 3)])
    return se3_exp(twist)


def random_plane(rng, d_scale=2000.0) -> PlaneHessian:
    n = rng.normal(size=3)
    n = n / np.linalg.norm(n)
    d = rng.uniform(500.0, d_scale)
    n, d = canonicalize_plane(n, -d)
    return PlaneHessian(n, d)


def sample_points_on_plane(plane: PlaneHessian, count, rng, extent=1000.0):
    """Points satisfying N.P + d = 0 exactly."""
    n = plane.normal
    ref = np.array([1.0, 0.0, 0.0])
    if abs(n @ ref) > 0.9:
        ref = np.array([0.0, 1.0, 0.0])
    u = np.cross(n, ref)
    u = u / np.linalg.norm(u)
    v = np.cross(n, u)
    a = rng.uniform(-extent, extent, size=count)
    b = rng.uniform(-extent, extent, size=count)
    origin = -plane.d * n
    return origin + a[:, None] * u + b[:, None] * v
