"""Shared geometric types and SE(3) utilities.

All lengths are in millimetres, all angles in radians. Poses are stored as
a rotation matrix plus translation vector; the minimal 6-vector
parameterization used by the solver is (translation, axis-angle), i.e.
``twist[:3]`` is t in mm and ``twist[3:]`` is the rotation axis scaled by
the rotation angle.

Plane sign convention: a plane is stored in Hessian normal form {N, d}
with N a unit vector, N.P + d = 0 for points P on the plane, and d < 0
for planes in front of the camera (the camera center at the origin gives
N.P = -d > 0).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

_ROT_TOL = 1e-8
_PSD_TOL = 1e-9


def _as_readonly(a, dtype=float):
    out = np.array(a, dtype=dtype)
    out.flags.writeable = False
    return out


def check_psd(m, tol=_PSD_TOL):
    """True if m is symmetric positive semi-definite.

    Eigenvalues are allowed to be slightly negative relative to the trace
    (numerical slack of first-order propagation chains).
    """
    m = np.asarray(m, dtype=float)
    if not np.allclose(m, m.T, atol=1e-6 * max(1.0, np.abs(m).max())):
        return False
    w = np.linalg.eigvalsh(0.5 * (m + m.T))
    scale = max(np.trace(m), 1.0)
    return bool(w.min() >= -tol * scale)


def skew(v):
    """Cross-product matrix: skew(v) @ u == cross(v, u)."""
    v = np.asarray(v, dtype=float)
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def so3_exp(omega):
    """Rotation matrix from an axis-angle 3-vector (Rodrigues)."""
    omega = np.asarray(omega, dtype=float)
    theta = np.linalg.norm(omega)
    w = skew(omega)
    if theta < 1e-8:
        # second-order series; exact enough below the switch point
        return np.eye(3) + w + 0.5 * (w @ w)
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + a * w + b * (w @ w)


def so3_log(rotation):
    """Axis-angle 3-vector of a rotation matrix; rejects angle == pi."""
    r = np.asarray(rotation, dtype=float)
    cos_theta = np.clip((np.trace(r) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_theta)
    if np.pi - theta < 1e-9:
        raise ValueError("rotation angle at pi: axis is ambiguous")
    v = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    if theta < 1e-8:
        return 0.5 * v
    if theta > 3.0:
        # sin(theta) is small: recover the axis from the symmetric part,
        # where (R + R^T)/2 - cos(theta) I == (1 - cos(theta)) n n^T
        b = (r + r.T) / 2.0 - cos_theta * np.eye(3)
        k = int(np.argmax(np.diag(b)))
        axis = b[:, k] / np.linalg.norm(b[:, k])
        if np.dot(axis, v) < 0:
            axis = -axis
        return theta * axis
    return (theta / (2.0 * np.sin(theta))) * v


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics of the registered RGB/depth pair (pixels)."""
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    depth_scale: float = 0.2  # mm per raw sensor unit (TUM: 1/5000 m)

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point outside the image")


@dataclass(frozen=True)
class PoseSE3:
    """Rigid transform {R, t} with optional 6x6 parameter covariance.

    covariance, when present, is over the (translation, axis-angle) local
    perturbation at the stored pose.
    """
    rotation: np.ndarray
    translation: np.ndarray
    covariance: Optional[np.ndarray] = None

    def __post_init__(self):
        r = _as_readonly(self.rotation)
        t = _as_readonly(self.translation)
        if r.shape != (3, 3) or t.shape != (3,):
            raise ValueError("rotation must be 3x3 and translation length 3")
        if not np.allclose(r @ r.T, np.eye(3), atol=_ROT_TOL):
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > 1e-6:
            raise ValueError("rotation determinant is not +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)
        if self.covariance is not None:
            c = _as_readonly(self.covariance)
            if c.shape != (6, 6) or not check_psd(c):
                raise ValueError("pose covariance must be 6x6 symmetric PSD")
            object.__setattr__(self, "covariance", c)

    @staticmethod
    def identity():
        return PoseSE3(np.eye(3), np.zeros(3))

    def compose(self, other: "PoseSE3") -> "PoseSE3":
        """self o other: apply other first, then self."""
        return PoseSE3(self.rotation @ other.rotation,
                       self.rotation @ other.translation + self.translation)

    def inverse(self) -> "PoseSE3":
        rt = self.rotation.T
        return PoseSE3(rt, -rt @ self.translation)

    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def with_covariance(self, cov) -> "PoseSE3":
        return replace(self, covariance=cov)


def se3_apply(pose: PoseSE3, point):
    """R @ point + t; accepts a (3,) vector or an (N, 3) array."""
    p = np.asarray(point, dtype=float)
    return p @ pose.rotation.T + pose.translation


def se3_exp(twist) -> PoseSE3:
    """Pose from a 6-vector (translation, axis-angle)."""
    v = np.asarray(twist, dtype=float)
    if v.shape != (6,):
        raise ValueError("twist must be a 6-vector")
    return PoseSE3(so3_exp(v[3:]), v[:3])


def se3_log(pose: PoseSE3):
    """Inverse of se3_exp; rejects rotations with angle exactly pi."""
    return np.concatenate([pose.translation, so3_log(pose.rotation)])


@dataclass(frozen=True)
class Point3WithCov:
    """Back-projected 3D point (mm) with 3x3 covariance (mm^2).

    pixel is the originating image location and descriptor the feature
    vector attached to it; both may be absent for raw cloud points.
    """
    position: np.ndarray
    covariance: np.ndarray
    pixel: Optional[np.ndarray] = None
    descriptor: Optional[np.ndarray] = None

    def __post_init__(self):
        p = _as_readonly(self.position)
        c = _as_readonly(self.covariance)
        if p.shape != (3,) or c.shape != (3, 3):
            raise ValueError("position must be length 3, covariance 3x3")
        if p[2] <= 0:
            raise ValueError("point depth must be positive")
        if not check_psd(c):
            raise ValueError("point covariance must be symmetric PSD")
        object.__setattr__(self, "position", p)
        object.__setattr__(self, "covariance", c)
        if self.pixel is not None:
            object.__setattr__(self, "pixel", _as_readonly(self.pixel))
        if self.descriptor is not None:
            object.__setattr__(self, "descriptor", _as_readonly(self.descriptor))


@dataclass(frozen=True)
class PlaneMinimal:
    """Minimal plane parameterization N/d (mm^-1) with 3x3 covariance."""
    theta_m: np.ndarray
    covariance: np.ndarray
    inlier_count: int = 0

    def __post_init__(self):
        th = _as_readonly(self.theta_m)
        c = _as_readonly(self.covariance)
        if th.shape != (3,) or c.shape != (3, 3):
            raise ValueError("theta_m must be length 3, covariance 3x3")
        if np.linalg.norm(th) == 0.0:
            raise ValueError("theta_m must be nonzero (d = 0 is excluded)")
        if not check_psd(c):
            raise ValueError("plane covariance must be symmetric PSD")
        object.__setattr__(self, "theta_m", th)
        object.__setattr__(self, "covariance", c)


@dataclass(frozen=True)
class PlaneHessian:
    """Hessian normal form {N, d} with 4x4 covariance over (N, d).

    inlier_mask, when present, is a flat boolean array over the image
    pixels that supported the fit.
    """
    normal: np.ndarray
    d: float
    covariance: Optional[np.ndarray] = None
    inlier_mask: Optional[np.ndarray] = None
    inlier_count: int = 0

    def __post_init__(self):
        n = _as_readonly(self.normal)
        if n.shape != (3,):
            raise ValueError("normal must be length 3")
        if abs(np.linalg.norm(n) - 1.0) > 1e-9:
            raise ValueError("normal must be unit length")
        object.__setattr__(self, "normal", n)
        if self.covariance is not None:
            c = _as_readonly(self.covariance)
            if c.shape != (4, 4) or not check_psd(c):
                raise ValueError("plane covariance must be 4x4 symmetric PSD")
            object.__setattr__(self, "covariance", c)
        if self.inlier_mask is not None:
            m = _as_readonly(self.inlier_mask, dtype=bool)
            object.__setattr__(self, "inlier_mask", m)
            if int(m.sum()) != self.inlier_count:
                raise ValueError("inlier_count does not match the mask popcount")


def canonicalize_plane(normal, d):
    """Flip {N, d} jointly so that d < 0 (plane in front of the camera)."""
    normal = np.asarray(normal, dtype=float)
    if d > 0:
        return -normal, -d
    return normal, float(d)


def transform_plane(pose: PoseSE3, plane: PlaneHessian) -> PlaneHessian:
    """Rigid transform of a plane: points on the plane stay on the output.

    For P' = R P + t the output {N', d'} satisfies N'.P' + d' = N.P + d,
    i.e. N' = R N and d' = d - t.(R N). The 4x4 covariance is propagated
    through this linear map.
    """
    n2 = pose.rotation @ plane.normal
    d2 = plane.d - float(pose.translation @ n2)
    cov = None
    if plane.covariance is not None:
        j = np.zeros((4, 4))
        j[:3, :3] = pose.rotation
        j[3, :3] = -pose.translation @ pose.rotation
        j[3, 3] = 1.0
        cov = j @ plane.covariance @ j.T
        cov = 0.5 * (cov + cov.T)
    return PlaneHessian(n2, d2, covariance=cov,
                        inlier_mask=plane.inlier_mask,
                        inlier_count=plane.inlier_count)
