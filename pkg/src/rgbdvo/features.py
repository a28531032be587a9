"""Keypoint detection, description, and ground-truth injection.

The built-in detector is a Harris corner test over a smoothed image with
non-maximum suppression; descriptors are mean-removed, L2-normalized
8x8 intensity patches (64 floats). The frontend is deliberately
pluggable: dataset runs can instead load precomputed keypoints from
sidecar ".feat" files, and synthetic runs can inject perfect
correspondences whose descriptors encode landmark identities.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from scipy import ndimage

from .geometry import CameraIntrinsics, PoseSE3, se3_apply

_PATCH_HALF = 4
_BORDER = 12


@dataclass(frozen=True)
class FeatureConfig:
    max_features: int = 800
    smoothing_sigma: float = 1.0
    structure_sigma: float = 1.5
    harris_k: float = 0.04
    response_rel_threshold: float = 0.01
    response_abs_threshold: float = 1e-8
    nms_size: int = 5


@dataclass(frozen=True)
class Keypoint:
    """Sub-pixel image location with descriptor and detector response."""
    pixel: np.ndarray
    descriptor: np.ndarray
    response: float = 0.0

    def __post_init__(self):
        p = np.array(self.pixel, dtype=float)
        d = np.array(self.descriptor, dtype=float)
        p.flags.writeable = False
        d.flags.writeable = False
        object.__setattr__(self, "pixel", p)
        object.__setattr__(self, "descriptor", d)


def _describe(smoothed, v, u):
    patch = smoothed[v - _PATCH_HALF:v + _PATCH_HALF,
                     u - _PATCH_HALF:u + _PATCH_HALF].astype(float).ravel()
    patch = patch - patch.mean()
    norm = np.linalg.norm(patch)
    if norm > 1e-12:
        patch = patch / norm
    return patch


def detect_and_describe(image, config: FeatureConfig = FeatureConfig()
                        ) -> List[Keypoint]:
    """Harris corners sorted by response, at most max_features.

    image is a 2D grayscale array (any float/int range). Returns an empty
    list for textureless images.
    """
    img = np.asarray(image, dtype=float)
    if img.ndim != 2 or img.size == 0:
        raise ValueError("image must be a non-empty 2D grayscale array")
    span = img.max() - img.min()
    if span > 0:
        img = (img - img.min()) / span
    smoothed = ndimage.gaussian_filter(img, config.smoothing_sigma)
    iy, ix = np.gradient(smoothed)
    sxx = ndimage.gaussian_filter(ix * ix, config.structure_sigma)
    syy = ndimage.gaussian_filter(iy * iy, config.structure_sigma)
    sxy = ndimage.gaussian_filter(ix * iy, config.structure_sigma)
    response = sxx * syy - sxy**2 - config.harris_k * (sxx + syy) ** 2

    threshold = max(config.response_abs_threshold,
                    config.response_rel_threshold * response.max())
    local_max = ndimage.maximum_filter(response, size=config.nms_size)
    peaks = (response >= threshold) & (response == local_max)
    peaks[:_BORDER, :] = peaks[-_BORDER:, :] = False
    peaks[:, :_BORDER] = peaks[:, -_BORDER:] = False
    vs, us = np.nonzero(peaks)
    if len(vs) == 0:
        return []
    order = np.lexsort((us, vs, -response[vs, us]))
    order = order[: config.max_features]
    return [Keypoint(np.array([us[i], vs[i]], dtype=float),
                     _describe(smoothed, vs[i], us[i]),
                     float(response[vs[i], us[i]]))
            for i in order]


def project_landmarks(landmarks, pose_world_cam: PoseSE3,
                      intrinsics: CameraIntrinsics):
    """Project world landmarks into a camera; returns (ids, pixels, depths).

    pose_world_cam maps camera coordinates to world coordinates.
    Landmarks behind the camera or outside the image are excluded.
    """
    lm = np.asarray(landmarks, dtype=float)
    cam = se3_apply(pose_world_cam.inverse(), lm)
    z = cam[:, 2]
    u = intrinsics.fx * cam[:, 0] / np.where(z != 0, z, 1.0) + intrinsics.cx
    v = intrinsics.fy * cam[:, 1] / np.where(z != 0, z, 1.0) + intrinsics.cy
    ok = (z > 0) & (u >= 0) & (u <= intrinsics.width - 1) \
        & (v >= 0) & (v <= intrinsics.height - 1)
    ids = np.flatnonzero(ok)
    return ids, np.stack([u[ok], v[ok]], axis=-1), z[ok]


def landmark_keypoints(landmarks, pose_world_cam: PoseSE3,
                       intrinsics: CameraIntrinsics,
                       pixel_sigma: float = 0.0,
                       rng: Optional[np.random.Generator] = None):
    """Keypoints for visible landmarks with identity descriptors.

    Returns (keypoints, depths_mm); pixels are perturbed by Gaussian
    noise of the given std when pixel_sigma > 0.
    """
    ids, pix, z = project_landmarks(landmarks, pose_world_cam, intrinsics)
    if pixel_sigma > 0:
        if rng is None:
            raise ValueError("pixel noise requires an rng")
        pix = pix + rng.normal(0.0, pixel_sigma, size=pix.shape)
    kps = [Keypoint(pix[i], np.array([float(ids[i])]), 1.0)
           for i in range(len(ids))]
    return kps, z


def inject_ground_truth(landmarks, pose_a: PoseSE3, pose_b: PoseSE3,
                        intrinsics: CameraIntrinsics,
                        pixel_sigma: float = 0.0,
                        rng: Optional[np.random.Generator] = None
                        ) -> List[Tuple[Keypoint, Keypoint]]:
    """Perfectly associated keypoint pairs between two camera poses.

    Only landmarks visible in both views are returned; descriptors carry
    the landmark index so downstream matching is exact by construction.
    """
    kps_a, _ = landmark_keypoints(landmarks, pose_a, intrinsics,
                                  pixel_sigma, rng)
    kps_b, _ = landmark_keypoints(landmarks, pose_b, intrinsics,
                                  pixel_sigma, rng)
    by_id = {int(k.descriptor[0]): k for k in kps_b}
    pairs = []
    for ka in kps_a:
        kb = by_id.get(int(ka.descriptor[0]))
        if kb is not None:
            pairs.append((ka, kb))
    return pairs


def save_keypoints(path, keypoints: List[Keypoint]):
    """Sidecar format: one "u v response d_1 ... d_k" record per line."""
    with open(path, "w") as f:
        for kp in keypoints:
            fields = [repr(float(kp.pixel[0])), repr(float(kp.pixel[1])),
                      repr(float(kp.response))]
            fields += [repr(float(x)) for x in kp.descriptor]
            f.write(" ".join(fields) + "\n")


def load_keypoints(path) -> List[Keypoint]:
    kps = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            vals = [float(x) for x in line.split()]
            if len(vals) < 4:
                raise ValueError(f"{path}:{lineno}: truncated keypoint record")
            kps.append(Keypoint(np.array(vals[:2]), np.array(vals[3:]),
                                vals[2]))
    return kps
