"""Depth pixel back-projection with first-order uncertainty propagation.

The depth noise follows the quadratic structured-light model
sigma_Z = c * Z^2 (mm) with c = 1.425e-6 by default, and the pixel noise
is isotropic with sigma_p = 0.5 px (quantization). The 3x3 covariance of
a back-projected point is J diag(sigma_p^2, sigma_p^2, sigma_Z^2) J^T
with J the Jacobian of the back-projection w.r.t. (u, v, Z).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .geometry import CameraIntrinsics, Point3WithCov

# structured-light working range (mm); depths outside are treated invalid
MIN_VALID_DEPTH_MM = 300.0
MAX_VALID_DEPTH_MM = 10000.0


@dataclass(frozen=True)
class NoiseModel:
    """Sensor noise parameters: pixel std (px) and depth coefficient (1/mm)."""
    sigma_p: float = 0.5
    depth_sigma_coeff: float = 1.425e-6

    def __post_init__(self):
        if self.sigma_p <= 0 or self.depth_sigma_coeff <= 0:
            raise ValueError("noise parameters must be positive")


def depth_sigma(z, model: NoiseModel):
    """Depth standard deviation (mm) at depth z (mm): coeff * z^2."""
    z = np.asarray(z, dtype=float)
    if np.any(z <= 0):
        raise ValueError("depth must be positive")
    return model.depth_sigma_coeff * z**2


@dataclass(frozen=True)
class DepthImage:
    """Raw depth grid plus intrinsics; raw value 0 encodes no measurement."""
    data: np.ndarray
    intrinsics: CameraIntrinsics
    timestamp: float = 0.0

    def __post_init__(self):
        d = np.asarray(self.data)
        if d.ndim != 2:
            raise ValueError("depth data must be a 2D grid")
        if (d.shape[0] != self.intrinsics.height
                or d.shape[1] != self.intrinsics.width):
            raise ValueError("depth grid does not match the intrinsics size")
        object.__setattr__(self, "data", d)

    def depth_mm(self):
        """Converted depth in mm (float array; invalid pixels are <= 0)."""
        return np.asarray(self.data, dtype=float) * self.intrinsics.depth_scale

    def valid_mask(self):
        z = self.depth_mm()
        return (np.asarray(self.data) > 0) \
            & (z >= MIN_VALID_DEPTH_MM) & (z <= MAX_VALID_DEPTH_MM)


def backproject(pixel, z, intrinsics: CameraIntrinsics):
    """Pixel plus depth (mm) to a 3D point (mm).

    Accepts a single (u, v) pair with scalar z, or (..., 2) pixels with
    matching z array.
    """
    p = np.asarray(pixel, dtype=float)
    z = np.asarray(z, dtype=float)
    if np.any(z <= 0):
        raise ValueError("depth must be positive")
    x = (p[..., 0] - intrinsics.cx) / intrinsics.fx
    y = (p[..., 1] - intrinsics.cy) / intrinsics.fy
    return np.stack([z * x, z * y, z * np.ones_like(x)], axis=-1)


def backproject_jacobian(pixel, z, intrinsics: CameraIntrinsics):
    """Jacobian of backproject w.r.t. (u, v, Z); shape (..., 3, 3)."""
    p = np.asarray(pixel, dtype=float)
    z = np.asarray(z, dtype=float)
    x = (p[..., 0] - intrinsics.cx) / intrinsics.fx
    y = (p[..., 1] - intrinsics.cy) / intrinsics.fy
    zero = np.zeros_like(x)
    one = np.ones_like(x)
    j = np.stack([
        np.stack([z / intrinsics.fx, zero, x], axis=-1),
        np.stack([zero, z / intrinsics.fy, y], axis=-1),
        np.stack([zero, zero, one], axis=-1),
    ], axis=-2)
    return j


def backprojection_cov(pixel, z, intrinsics: CameraIntrinsics,
                       model: NoiseModel):
    """First-order 3x3 covariance of back-projected points; (..., 3, 3)."""
    j = backproject_jacobian(pixel, z, intrinsics)
    sz = depth_sigma(z, model)
    var = np.stack([np.full_like(sz, model.sigma_p**2),
                    np.full_like(sz, model.sigma_p**2),
                    sz**2], axis=-1)
    cov = np.einsum("...ik,...k,...jk->...ij", j, var, j)
    return 0.5 * (cov + np.swapaxes(cov, -1, -2))


def backproject_with_cov(pixel, z, intrinsics: CameraIntrinsics,
                         model: NoiseModel,
                         descriptor: Optional[np.ndarray] = None) -> Point3WithCov:
    """Back-project one pixel and attach the propagated covariance."""
    z = float(z)
    if z <= 0:
        raise ValueError("depth must be positive")
    pos = backproject(pixel, z, intrinsics)
    cov = backprojection_cov(pixel, z, intrinsics, model)
    return Point3WithCov(pos, cov, pixel=np.asarray(pixel, dtype=float),
                         descriptor=descriptor)
