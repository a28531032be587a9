"""Residual models, weighting, and the robust pose solver."""
import numpy as np
import pytest

from rgbdvo.backprojection import NoiseModel, backproject_with_cov
from rgbdvo.geometry import (CameraIntrinsics, PlaneHessian, Point3WithCov,
                             PoseSE3, check_psd, se3_apply, se3_exp, se3_log,
                             so3_exp, transform_plane)
from rgbdvo.matching import PlaneMatch, PointMatch
from rgbdvo.solver import (FALLBACK_COV_GATE, FALLBACK_FEW_MATCHES,
                           FALLBACK_NONE, SolverConfig, decayed_velocity,
                           plane_jacobian, plane_residual, plane_residual_cov,
                           point_jacobian, point_residual, point_residual_cov,
                           residual_weights, solve_pose, tukey_weights)

from conftest import random_plane, random_pose

INTR = CameraIntrinsics(fx=500.0, fy=500.0, cx=320.0, cy=240.0,
                        width=640, height=480, depth_scale=1.0)


def _point_match(prev_xyz, curr_xyz, prev_cov=None, curr_cov=None):
    prev_cov = np.eye(3) if prev_cov is None else prev_cov
    curr_cov = np.eye(3) if curr_cov is None else curr_cov
    return PointMatch(Point3WithCov(np.asarray(prev_xyz, float), prev_cov),
                      Point3WithCov(np.asarray(curr_xyz, float), curr_cov),
                      0.0)


def _exact_point_matches(pose, rng, count, cov_scale=1.0):
    matches = []
    for _ in range(count):
        p = np.array([rng.uniform(-800, 800), rng.uniform(-600, 600),
                      rng.uniform(800, 3000)])
        matches.append(_point_match(p, se3_apply(pose, p),
                                    cov_scale * np.eye(3),
                                    cov_scale * np.eye(3)))
    return matches


def _exact_plane_matches(pose, planes):
    return [PlaneMatch(p, transform_plane(pose, p), 1.0, 0.0)
            for p in planes]


def _random_spd(rng, n, scale=1.0):
    a = rng.normal(size=(n, n))
    return scale * (a @ a.T + n * np.eye(n))


def _apply_delta(pose, delta):
    return PoseSE3(so3_exp(delta[3:]) @ pose.rotation,
                   pose.translation + delta[:3])


def test_config_validation():
    SolverConfig(alpha=0.0)
    with pytest.raises(ValueError):
        SolverConfig(alpha=-1.0)
    with pytest.raises(ValueError):
        SolverConfig(velocity_decay=1.5)


def test_decayed_velocity():
    twist = np.array([10.0, 0.0, 0.0, 0.0, 0.0, 0.2])
    pose = decayed_velocity(twist, 0.5)
    assert np.allclose(se3_log(pose), 0.5 * twist, atol=1e-12)
    assert np.allclose(decayed_velocity(twist, 0.0).matrix(), np.eye(4))
    with pytest.raises(ValueError):
        decayed_velocity(twist, -0.1)


def test_point_residual_formula_oracle():
    rng = np.random.default_rng(0)
    for _ in range(50):
        pose = random_pose(rng)
        m = _point_match(rng.uniform(100, 1000, 3), rng.uniform(100, 1000, 3))
        expected = m.curr.position - (pose.rotation @ m.prev.position
                                      + pose.translation)
        assert np.allclose(point_residual(pose, m), expected, atol=1e-9)


def test_plane_residual_zero_for_exact_transform():
    rng = np.random.default_rng(1)
    for _ in range(50):
        pose = random_pose(rng)
        plane = random_plane(rng)
        m = PlaneMatch(plane, transform_plane(pose, plane), 1.0, 0.0)
        assert np.linalg.norm(plane_residual(pose, m)) < 1e-9


def test_plane_residual_norm_is_plane_distance_at_identity():
    rng = np.random.default_rng(2)
    for _ in range(50):
        a, b = random_plane(rng), random_plane(rng)
        m = PlaneMatch(a, b, 1.0, 0.0)
        r = plane_residual(PoseSE3.identity(), m)
        assert np.isclose(np.linalg.norm(r),
                          np.linalg.norm(b.d * b.normal - a.d * a.normal))


def test_point_jacobian_matches_finite_differences():
    rng = np.random.default_rng(3)
    eps = 1e-5
    for _ in range(100):
        pose = random_pose(rng)
        m = _point_match(rng.uniform(100, 2000, 3), rng.uniform(100, 2000, 3))
        j = point_jacobian(pose, m)
        for k in range(6):
            d = np.zeros(6)
            d[k] = eps
            fd = (point_residual(_apply_delta(pose, d), m)
                  - point_residual(_apply_delta(pose, -d), m)) / (2 * eps)
            scale = max(1.0, float(np.abs(fd).max()))
            assert np.all(np.abs(j[:, k] - fd) / scale < 1e-5)


def test_plane_jacobian_matches_finite_differences():
    rng = np.random.default_rng(4)
    eps = 1e-6
    for _ in range(100):
        pose = random_pose(rng)
        m = PlaneMatch(random_plane(rng), random_plane(rng), 1.0, 0.0)
        j = plane_jacobian(pose, m)
        for k in range(6):
            d = np.zeros(6)
            d[k] = eps
            fd = (plane_residual(_apply_delta(pose, d), m)
                  - plane_residual(_apply_delta(pose, -d), m)) / (2 * eps)
            scale = max(1.0, float(np.abs(fd).max()))
            assert np.all(np.abs(j[:, k] - fd) / scale < 1e-5)


def test_point_residual_cov_identity_pose_sums_covariances():
    sigma2 = 4.0
    m = _point_match([0, 0, 1000], [0, 0, 1000],
                     sigma2 * np.eye(3), sigma2 * np.eye(3))
    cov = point_residual_cov(PoseSE3.identity(), m)
    assert np.allclose(cov, 2 * sigma2 * np.eye(3))
    w = residual_weights(PoseSE3.identity(), m)
    assert np.allclose(w, 1.0 / (2 * sigma2))


def test_point_residual_cov_rotation_invariant_trace():
    rng = np.random.default_rng(5)
    cov_prev = _random_spd(rng, 3)
    m = _point_match([100, 50, 1000], [100, 50, 1000], cov_prev, np.eye(3))
    for _ in range(20):
        pose = random_pose(rng)
        c = point_residual_cov(pose, m)
        assert np.isclose(np.trace(c), np.trace(cov_prev) + 3.0)
        assert check_psd(c)


def test_far_points_get_smaller_weights():
    model = NoiseModel()
    near = backproject_with_cov([400.0, 300.0], 1000.0, INTR, model)
    far = backproject_with_cov([400.0, 300.0], 4000.0, INTR, model)
    m_near = PointMatch(near, near, 0.0)
    m_far = PointMatch(far, far, 0.0)
    w_near = residual_weights(PoseSE3.identity(), m_near)
    w_far = residual_weights(PoseSE3.identity(), m_far)
    assert np.all(w_far < w_near)


def test_residual_weights_are_clamped():
    cfg = SolverConfig()
    exact = _point_match([0, 0, 1000], [0, 0, 1000],
                         np.zeros((3, 3)), np.zeros((3, 3)))
    assert np.allclose(residual_weights(PoseSE3.identity(), exact, cfg),
                       cfg.weight_max)
    fuzzy = _point_match([0, 0, 1000], [0, 0, 1000],
                         1e20 * np.eye(3), 1e20 * np.eye(3))
    assert np.allclose(residual_weights(PoseSE3.identity(), fuzzy, cfg),
                       cfg.weight_min)


def test_point_residual_cov_matches_monte_carlo():
    rng = np.random.default_rng(6)
    pose = random_pose(rng)
    cov_prev = _random_spd(rng, 3, scale=2.0)
    cov_curr = _random_spd(rng, 3, scale=1.0)
    prev = np.array([200.0, -150.0, 1500.0])
    curr = se3_apply(pose, prev)
    m = _point_match(prev, curr, cov_prev, cov_curr)
    analytic = np.diag(point_residual_cov(pose, m))

    l_prev = np.linalg.cholesky(cov_prev)
    l_curr = np.linalg.cholesky(cov_curr)
    n = 20000
    dp = rng.normal(size=(n, 3)) @ l_prev.T
    dc = rng.normal(size=(n, 3)) @ l_curr.T
    samples = (curr + dc) - (dp + prev) @ pose.rotation.T - \
        (curr - prev @ pose.rotation.T)
    mc = samples.var(axis=0)
    assert np.all(np.abs(mc - analytic) / analytic < 0.15)


def test_plane_residual_cov_matches_monte_carlo():
    rng = np.random.default_rng(7)
    pose = random_pose(rng)
    plane_prev = random_plane(rng)
    plane_curr = transform_plane(pose, plane_prev)
    cov_prev = _random_spd(rng, 4, scale=1e-7)
    cov_curr = _random_spd(rng, 4, scale=1e-7)
    m = PlaneMatch(PlaneHessian(plane_prev.normal, plane_prev.d,
                                covariance=cov_prev),
                   PlaneHessian(plane_curr.normal, plane_curr.d,
                                covariance=cov_curr), 1.0, 0.0)
    analytic = np.diag(plane_residual_cov(pose, m))

    # sample raw (normal, d) perturbations and evaluate the residual
    # expression directly so no unit-norm projection hides variance
    n = 20000
    dp = rng.normal(size=(n, 4)) @ np.linalg.cholesky(cov_prev).T
    dc = rng.normal(size=(n, 4)) @ np.linalg.cholesky(cov_curr).T
    np_prev = plane_prev.normal + dp[:, :3]
    d_prev = plane_prev.d + dp[:, 3]
    nt = np_prev @ pose.rotation.T
    dt = d_prev - nt @ pose.translation
    nc = plane_curr.normal + dc[:, :3]
    d_curr = plane_curr.d + dc[:, 3]
    samples = d_curr[:, None] * nc - dt[:, None] * nt
    mc = samples.var(axis=0)
    assert np.all(np.abs(mc - analytic) / analytic < 0.15)


def test_tukey_weights_behavior():
    norms = np.array([0.1, 0.5, 0.8, 1.2, 0.3, 2.0, 50.0])
    w = tukey_weights(norms, 4.685)
    assert w[-1] == 0.0
    assert np.all(w[:-1] > 0.0)
    assert np.all(w <= 1.0)
    # clustered norms must not be rejected wholesale
    clustered = tukey_weights(np.full(10, 2.0) + 1e-9, 4.685)
    assert np.all(clustered > 0.5)


def test_solve_exact_points_recovers_pose():
    rng = np.random.default_rng(8)
    truth = se3_exp(np.array([20.0, -10.0, 15.0, 0.02, -0.01, 0.03]))
    matches = _exact_point_matches(truth, rng, 10)
    report = solve_pose(matches, [])
    assert report.fallback_used == FALLBACK_NONE
    err = se3_log(report.pose.inverse().compose(truth))
    assert np.abs(err[:3]).max() < 1e-9
    assert np.abs(err[3:]).max() < 1e-9


def test_solve_matches_closed_form_rigid_alignment():
    # independent oracle: Kabsch/Umeyama alignment of exact correspondences
    rng = np.random.default_rng(9)
    truth = random_pose(rng, trans_scale=50.0, rot_scale=0.1)
    matches = _exact_point_matches(truth, rng, 30)
    prev = np.stack([m.prev.position for m in matches])
    curr = np.stack([m.curr.position for m in matches])
    pc, cc = prev.mean(axis=0), curr.mean(axis=0)
    u, _, vt = np.linalg.svd((curr - cc).T @ (prev - pc))
    s = np.diag([1.0, 1.0, np.sign(np.linalg.det(u @ vt))])
    r_oracle = u @ s @ vt
    t_oracle = cc - r_oracle @ pc
    report = solve_pose(matches, [])
    assert np.allclose(report.pose.rotation, r_oracle, atol=1e-6)
    assert np.allclose(report.pose.translation, t_oracle, atol=1e-6)


def test_solve_exact_planes_recovers_pose():
    rng = np.random.default_rng(10)
    truth = se3_exp(np.array([10.0, 5.0, -8.0, 0.01, 0.02, -0.015]))
    normals = [np.array([0.0, 0.0, 1.0]), np.array([1.0, 0.0, 0.3]),
               np.array([0.0, 1.0, 0.2])]
    planes = [PlaneHessian(n / np.linalg.norm(n), -rng.uniform(800, 2500))
              for n in normals]
    report = solve_pose([], _exact_plane_matches(truth, planes))
    assert report.fallback_used == FALLBACK_NONE
    err = se3_log(report.pose.inverse().compose(truth))
    assert np.abs(err[:3]).max() < 1e-6
    assert np.abs(err[3:]).max() < 1e-6


def test_too_few_matches_fall_back_to_decayed_velocity():
    rng = np.random.default_rng(11)
    matches = _exact_point_matches(PoseSE3.identity(), rng, 2)
    twist = np.array([4.0, 0.0, 0.0, 0.0, 0.0, 0.1])
    report = solve_pose(matches, [], prior_twist=twist)
    assert report.fallback_used == FALLBACK_FEW_MATCHES
    assert not report.converged
    assert np.allclose(se3_log(report.pose), 0.5 * twist, atol=1e-12)


def test_degenerate_geometry_triggers_covariance_gate():
    # three parallel planes constrain only one translation direction
    planes = [PlaneHessian(np.array([0.0, 0.0, 1.0]), -d)
              for d in (1000.0, 1500.0, 2000.0)]
    matches = [PlaneMatch(p, p, 1.0, 0.0) for p in planes]
    report = solve_pose([], matches)
    assert report.fallback_used == FALLBACK_COV_GATE


def test_gross_outliers_are_rejected():
    rng = np.random.default_rng(12)
    truth = se3_exp(np.array([15.0, -8.0, 10.0, 0.015, -0.02, 0.01]))
    clean = _exact_point_matches(truth, rng, 20)
    noisy = []
    for m in clean:
        jitter = rng.normal(0.0, 1.0, 3)
        noisy.append(_point_match(m.prev.position,
                                  m.curr.position + jitter))
    baseline = solve_pose(noisy, [])
    base_err = np.linalg.norm(
        se3_log(baseline.pose.inverse().compose(truth)))

    outliers = [_point_match(m.prev.position,
                             m.curr.position + rng.normal(0.0, 200.0, 3))
                for m in _exact_point_matches(truth, rng, 5)]
    contaminated = solve_pose(noisy + outliers, [])
    cont_err = np.linalg.norm(
        se3_log(contaminated.pose.inverse().compose(truth)))
    assert contaminated.fallback_used == FALLBACK_NONE
    assert cont_err < 2.0 * max(base_err, 1e-6)


def test_final_cost_not_above_initial_cost():
    rng = np.random.default_rng(13)
    truth = random_pose(rng, trans_scale=30.0, rot_scale=0.05)
    matches = []
    for m in _exact_point_matches(truth, rng, 40):
        matches.append(_point_match(m.prev.position,
                                    m.curr.position + rng.normal(0, 2.0, 3)))
    report = solve_pose(matches, [])
    identity_cost = sum(
        float(r @ r) for r in
        (point_residual(PoseSE3.identity(), m) for m in matches))
    # weights differ between assemblies, but the optimum must beat the
    # unweighted identity cost by a wide margin for this geometry
    assert report.final_cost < identity_cost


def test_alpha_scaling_equivalent_to_covariance_scaling():
    rng = np.random.default_rng(14)
    truth = random_pose(rng, trans_scale=20.0, rot_scale=0.03)
    planes = [PlaneHessian(n / np.linalg.norm(n), -rng.uniform(900, 2200),
                           covariance=_random_spd(rng, 4, 1e-6))
              for n in (np.array([0.1, 0.0, 1.0]), np.array([1.0, 0.1, 0.2]),
                        np.array([0.0, 1.0, 0.3]))]
    plane_matches = _exact_plane_matches(truth, planes)
    scaled = [PlaneMatch(
        PlaneHessian(m.prev.normal, m.prev.d,
                     covariance=m.prev.covariance / 10.0),
        PlaneHessian(m.curr.normal, m.curr.d,
                     covariance=m.curr.covariance / 10.0),
        m.overlap_fraction, m.plane_distance) for m in plane_matches]
    points = _exact_point_matches(truth, rng, 10)

    a = solve_pose(points, plane_matches, config=SolverConfig(alpha=100.0))
    b = solve_pose(points, scaled, config=SolverConfig(alpha=10.0))
    assert np.allclose(a.pose.matrix(), b.pose.matrix(), atol=1e-9)


def test_pose_covariance_grows_with_fewer_matches():
    rng = np.random.default_rng(15)
    truth = random_pose(rng, trans_scale=10.0, rot_scale=0.02)
    matches = _exact_point_matches(truth, rng, 40)
    full = solve_pose(matches, [])
    subset = solve_pose(matches[:8], [])
    assert check_psd(full.pose.covariance)
    assert check_psd(subset.pose.covariance)
    assert np.trace(subset.pose.covariance) > np.trace(full.pose.covariance)
