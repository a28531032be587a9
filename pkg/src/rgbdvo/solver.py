"""Robust uncertainty-weighted pose estimation.

The frame-to-frame transform is found by Levenberg-Marquardt over a
6-vector local perturbation (translation, axis-angle), minimizing the
stacked point and plane residuals

    E = sum_i w(P_i) P_i^2 + alpha * sum_j w(C_j) C_j^2

where each residual is a 3-vector, the weights are the elementwise
inverse diagonal of the first-order residual covariance, and point
residuals are additionally reweighted with a Tukey M-estimator. Plane
residuals use the distance vector between the planes' closest-to-origin
points and are not Tukey-reweighted.

Degenerate inputs (too few matches, non-finite values, or a pose
covariance failing the eigenvalue gate) fall back to a decaying velocity
prediction.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .geometry import PoseSE3, se3_apply, se3_exp, skew, so3_exp, transform_plane
from .matching import PlaneMatch, PointMatch, plane_to_plane_distance

FALLBACK_NONE = "none"
FALLBACK_FEW_MATCHES = "decayed_velocity_few_matches"
FALLBACK_COV_GATE = "decayed_velocity_covariance_gate"
FALLBACK_NONFINITE = "decayed_velocity_nonfinite"


@dataclass(frozen=True)
class SolverConfig:
    alpha: float = 10.0
    max_iterations: int = 50
    tukey_c: float = 4.685
    min_total_matches: int = 3
    pose_cov_eigen_max: float = 1e4
    velocity_decay: float = 0.5
    lm_lambda_init: float = 1e-4
    lm_lambda_factor: float = 10.0
    weight_min: float = 1e-12
    weight_max: float = 1e6
    probabilistic: bool = True          # False: all residual weights 1
    use_pose_cov_in_weights: bool = False
    step_tolerance: float = 1e-10
    cost_tolerance: float = 1e-12

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if not 0.0 <= self.velocity_decay <= 1.0:
            raise ValueError("velocity_decay must be in [0, 1]")


@dataclass(frozen=True)
class SolverReport:
    pose: PoseSE3
    converged: bool
    iterations: int
    fallback_used: str
    final_cost: float
    point_match_count: int
    plane_match_count: int


def decayed_velocity(prev_twist, decay: float) -> PoseSE3:
    """Damped replay of the previous frame's motion."""
    if not 0.0 <= decay <= 1.0:
        raise ValueError("decay must be in [0, 1]")
    return se3_exp(decay * np.asarray(prev_twist, dtype=float))


def point_residual(pose: PoseSE3, match: PointMatch):
    """curr - (R @ prev + t)."""
    return match.curr.position - se3_apply(pose, match.prev.position)


def plane_residual(pose: PoseSE3, match: PlaneMatch):
    """d'N' - d_T N_T for the transformed previous plane {N_T, d_T}.

    Zero exactly when the transformed previous plane coincides with the
    current plane; its norm is the plane-to-plane distance between them.
    """
    tp = transform_plane(pose, match.prev)
    return match.curr.d * match.curr.normal - tp.d * tp.normal


def point_jacobian(pose: PoseSE3, match: PointMatch):
    """d(point_residual)/d(delta) for the local update
    (t + dt, exp(dw) R); columns ordered (dt, dw)."""
    q = pose.rotation @ match.prev.position
    return np.hstack([-np.eye(3), skew(q)])


def plane_jacobian(pose: PoseSE3, match: PlaneMatch):
    """d(plane_residual)/d(delta); columns ordered (dt, dw)."""
    q = pose.rotation @ match.prev.normal
    d_t = match.prev.d - float(pose.translation @ q)
    j_t = np.outer(q, q)
    j_w = (d_t * np.eye(3) - np.outer(q, pose.translation)) @ skew(q)
    return np.hstack([j_t, j_w])


def point_residual_cov(pose: PoseSE3, match: PointMatch,
                       pose_cov=None):
    """First-order covariance of the point residual."""
    r = pose.rotation
    cov = match.curr.covariance + r @ match.prev.covariance @ r.T
    if pose_cov is not None:
        j = point_jacobian(pose, match)
        cov = cov + j @ pose_cov @ j.T
    return 0.5 * (cov + cov.T)


def plane_residual_cov(pose: PoseSE3, match: PlaneMatch,
                       pose_cov=None):
    """First-order covariance of the plane residual through both planes'
    4x4 parameter covariances."""
    n_c, d_c = match.curr.normal, match.curr.d
    g_curr = np.hstack([d_c * np.eye(3), n_c[:, None]])
    q = pose.rotation @ match.prev.normal
    d_t = match.prev.d - float(pose.translation @ q)
    g_prev = np.hstack([
        (d_t * np.eye(3) - np.outer(q, pose.translation)) @ pose.rotation,
        q[:, None],
    ])
    cov = np.zeros((3, 3))
    if match.curr.covariance is not None:
        cov = cov + g_curr @ match.curr.covariance @ g_curr.T
    if match.prev.covariance is not None:
        cov = cov + g_prev @ match.prev.covariance @ g_prev.T
    if pose_cov is not None:
        j = plane_jacobian(pose, match)
        cov = cov + j @ pose_cov @ j.T
    return 0.5 * (cov + cov.T)


def residual_weights(pose: PoseSE3, match, config: SolverConfig = SolverConfig(),
                     pose_cov=None):
    """Elementwise inverse-variance weights of one residual (3-vector).

    Off-diagonal covariance entries are deliberately ignored; weights are
    clamped to [weight_min, weight_max].
    """
    if isinstance(match, PointMatch):
        cov = point_residual_cov(pose, match, pose_cov)
    elif isinstance(match, PlaneMatch):
        cov = plane_residual_cov(pose, match, pose_cov)
    else:
        raise TypeError("match must be a PointMatch or PlaneMatch")
    var = np.clip(np.diag(cov), 0.0, None)
    return np.clip(1.0 / np.maximum(var, 1.0 / config.weight_max),
                   config.weight_min, config.weight_max)


def tukey_weights(norms, c: float):
    """Tukey biweight on norms studentized by 1.4826 * MAD.

    Degenerate scales (all norms nearly identical) yield unit weights.
    """
    s = np.asarray(norms, dtype=float)
    med = np.median(s)
    mad = np.median(np.abs(s - med))
    # floor the scale so tightly clustered norms (near-exact data) keep
    # the bulk of the residuals inside the biweight support
    sigma = max(1.4826 * mad, 2.0 * med / c)
    if sigma < 1e-12:
        return np.ones_like(s)
    u = s / sigma
    w = np.zeros_like(s)
    inside = np.abs(u) <= c
    w[inside] = (1.0 - (u[inside] / c) ** 2) ** 2
    return w


def _apply_delta(pose: PoseSE3, delta) -> PoseSE3:
    return PoseSE3(so3_exp(delta[3:]) @ pose.rotation,
                   pose.translation + delta[:3])


def _assemble(pose, point_matches, plane_matches, cfg, pose_cov):
    """Residuals, per-residual weights, and Jacobians at a pose."""
    n, m = len(point_matches), len(plane_matches)
    r = np.zeros((n + m, 3))
    w = np.ones((n + m, 3))
    for i, pm in enumerate(point_matches):
        r[i] = point_residual(pose, pm)
        if cfg.probabilistic:
            w[i] = residual_weights(pose, pm, cfg, pose_cov)
    if n > 0:
        norms = np.sqrt(np.sum(w[:n] * r[:n] ** 2, axis=1))
        w[:n] *= tukey_weights(norms, cfg.tukey_c)[:, None]
    for j, cm in enumerate(plane_matches):
        if cfg.probabilistic:
            w[n + j] = residual_weights(pose, cm, cfg, pose_cov)
        r[n + j] = plane_residual(pose, cm)
        w[n + j] *= cfg.alpha
    return r, w


def _jacobians(pose, point_matches, plane_matches):
    n, m = len(point_matches), len(plane_matches)
    j = np.zeros((n + m, 3, 6))
    for i, pm in enumerate(point_matches):
        j[i] = point_jacobian(pose, pm)
    for k, cm in enumerate(plane_matches):
        j[n + k] = plane_jacobian(pose, cm)
    return j


def _cost(r, w):
    return float(np.sum(w * r * r))


def solve_pose(point_matches: List[PointMatch],
               plane_matches: List[PlaneMatch],
               prior_twist=None,
               config: SolverConfig = SolverConfig()) -> SolverReport:
    """Iteratively reweighted LM over the joint point/plane cost.

    Falls back to the decayed-velocity prediction when fewer than
    min_total_matches matches are available, when residuals or Jacobians
    go non-finite, or when the post-optimization pose covariance exceeds
    the eigenvalue gate.
    """
    if prior_twist is None:
        prior_twist = np.zeros(6)
    prediction = decayed_velocity(prior_twist, config.velocity_decay)
    n, m = len(point_matches), len(plane_matches)

    def _fallback(flag, iterations=0):
        return SolverReport(prediction, False, iterations, flag,
                            np.nan, n, m)

    if n + m < config.min_total_matches:
        return _fallback(FALLBACK_FEW_MATCHES)

    pose = prediction
    lam = config.lm_lambda_init
    converged = False
    iterations = 0
    cost = np.nan
    pose_cov = None
    for it in range(config.max_iterations):
        iterations = it + 1
        if config.use_pose_cov_in_weights and it > 0:
            jj = _jacobians(pose, point_matches, plane_matches)
            hh = np.einsum("nki,nkj->ij", jj, jj)
            try:
                pose_cov = np.linalg.inv(hh + 1e-12 * np.eye(6))
            except np.linalg.LinAlgError:
                pose_cov = None
        r, w = _assemble(pose, point_matches, plane_matches, config, pose_cov)
        j = _jacobians(pose, point_matches, plane_matches)
        if not (np.isfinite(r).all() and np.isfinite(w).all()
                and np.isfinite(j).all()):
            return _fallback(FALLBACK_NONFINITE, iterations)
        cost = _cost(r, w)
        h = np.einsum("nki,nk,nkj->ij", j, w, j)
        g = np.einsum("nki,nk,nk->i", j, w, r)
        accepted = False
        delta = np.zeros(6)
        for _ in range(10):
            damped = h + lam * np.diag(np.diag(h))
            try:
                delta = np.linalg.solve(damped, -g)
            except np.linalg.LinAlgError:
                lam *= config.lm_lambda_factor
                continue
            candidate = _apply_delta(pose, delta)
            r2 = np.zeros_like(r)
            for i, pm in enumerate(point_matches):
                r2[i] = point_residual(candidate, pm)
            for k, cm in enumerate(plane_matches):
                r2[len(point_matches) + k] = plane_residual(candidate, cm)
            new_cost = _cost(r2, w)
            if np.isfinite(new_cost) and new_cost <= cost:
                pose = candidate
                lam = max(lam / config.lm_lambda_factor, 1e-12)
                accepted = True
                break
            lam *= config.lm_lambda_factor
        if not accepted:
            converged = True
            break
        if np.linalg.norm(delta) < config.step_tolerance:
            converged = True
            break
        if cost > 0 and (cost - new_cost) / cost < config.cost_tolerance:
            cost = new_cost
            converged = True
            break
        cost = new_cost

    # pose covariance from the unweighted Gauss-Newton Hessian J^T J
    j = _jacobians(pose, point_matches, plane_matches)
    h = np.einsum("nki,nkj->ij", j, j)
    try:
        eigvals = np.linalg.eigvalsh(0.5 * (h + h.T))
    except np.linalg.LinAlgError:
        return _fallback(FALLBACK_NONFINITE, iterations)
    if eigvals.min() <= 0 or 1.0 / eigvals.min() > config.pose_cov_eigen_max:
        return _fallback(FALLBACK_COV_GATE, iterations)
    cov = np.linalg.inv(0.5 * (h + h.T))
    cov = 0.5 * (cov + cov.T)
    pose = pose.with_covariance(cov)
    r, w = _assemble(pose, point_matches, plane_matches, config, None)
    return SolverReport(pose, converged, iterations, FALLBACK_NONE,
                        _cost(r, w), n, m)
