"""Geometry kernel tests: DLT, covariance propagation, linearization,
rotation-homography composition/decomposition, focal recovery.

Derived expectations come from independent oracles computed in-test:
forward application of a known homography, central finite differences,
Monte-Carlo redraws and pinhole projection.
"""

import numpy as np
import pytest

from ptztrack import geometry as geo
from ptztrack.errors import (
    AtInfinity,
    DegenerateConfiguration,
    NotARotation,
    TooFewMatches,
)


def random_homography(rng, scale=1.0):
    """A well-conditioned random homography (identity plus bounded noise)."""
    while True:
        h = np.eye(3) + scale * 0.3 * rng.standard_normal((3, 3))
        h[2, :2] *= 1e-3  # keep the perspective part mild
        if abs(np.linalg.det(h)) > 1e-3:
            return geo.normalize_homography(h)


def matches_from_h(h, n, rng, noise=0.0, span=400.0):
    src = rng.uniform(-span, span, size=(n, 2)) + 500.0
    dst = geo.apply_homography(h, src)
    if noise:
        src = src + rng.normal(0, noise, src.shape)
        dst = dst + rng.normal(0, noise, dst.shape)
    return [geo.PointMatch(s, d) for s, d in zip(src, dst)]


# ---------------------------------------------------------------------------
# estimate_homography_dlt
# ---------------------------------------------------------------------------

def test_dlt_identity_case():
    pts = np.array([[0, 0], [100, 0], [0, 100], [120, 130]], dtype=float)
    h = geo.estimate_homography_dlt([geo.PointMatch(p, p) for p in pts])
    assert np.allclose(h.h, np.eye(3) / np.sqrt(3), atol=1e-12)


def test_dlt_recovers_ground_truth():
    rng = np.random.default_rng(0)
    for _ in range(20):
        h_true = random_homography(rng)
        matches = matches_from_h(h_true, 20, rng)
        h_est = geo.estimate_homography_dlt(matches)
        assert np.linalg.norm(h_est.h - h_true) < 1e-9


def test_dlt_collinear_points_degenerate():
    pts = np.array([[0, 0], [1, 1], [2, 2], [3, 3]], dtype=float)
    with pytest.raises(DegenerateConfiguration):
        geo.estimate_homography_dlt([geo.PointMatch(p, p * 2) for p in pts])


def test_dlt_too_few_matches():
    pts = np.array([[0, 0], [1, 0], [0, 1]], dtype=float)
    with pytest.raises(TooFewMatches):
        geo.estimate_homography_dlt([geo.PointMatch(p, p) for p in pts])


# ---------------------------------------------------------------------------
# homography_covariance
# ---------------------------------------------------------------------------

def test_covariance_zero_for_zero_input_noise():
    rng = np.random.default_rng(1)
    h_true = random_homography(rng)
    matches = matches_from_h(h_true, 12, rng)
    zero = np.zeros((2, 2))
    matches = [
        geo.PointMatch(m.src, m.dst, src_cov=zero, dst_cov=zero) for m in matches
    ]
    cov = geo.homography_covariance(geo.estimate_homography_dlt(matches), matches)
    assert np.allclose(cov, 0.0, atol=1e-24)


def test_covariance_scales_linearly():
    rng = np.random.default_rng(2)
    h_true = random_homography(rng)
    base = matches_from_h(h_true, 15, rng)
    c1 = np.eye(2) * 0.5**2
    m1 = [geo.PointMatch(m.src, m.dst, src_cov=c1, dst_cov=c1) for m in base]
    m4 = [geo.PointMatch(m.src, m.dst, src_cov=4 * c1, dst_cov=4 * c1) for m in base]
    h_est = geo.estimate_homography_dlt(m1)
    cov1 = geo.homography_covariance(h_est, m1)
    cov4 = geo.homography_covariance(h_est, m4)
    assert np.allclose(cov4, 4.0 * cov1, rtol=1e-10, atol=1e-30)


def test_covariance_symmetric_psd():
    rng = np.random.default_rng(3)
    for _ in range(10):
        h_true = random_homography(rng)
        matches = matches_from_h(h_true, 10, rng, noise=0.5)
        h_est = geo.estimate_homography_dlt(matches)
        cov = geo.homography_covariance(h_est, matches)
        assert np.allclose(cov, cov.T, atol=1e-18)
        w = np.linalg.eigvalsh(cov)
        assert w.min() >= -1e-12 * cov.trace()


def test_covariance_against_full_pipeline_jacobian():
    # independent oracle: central differences through the whole DLT pipeline
    rng = np.random.default_rng(11)
    h_true = random_homography(rng)
    src = rng.uniform(100, 900, size=(12, 2))
    dst = geo.apply_homography(h_true, src)
    sigma = 0.5
    cov2 = np.eye(2) * sigma**2
    matches = [geo.PointMatch(s, d, src_cov=cov2, dst_cov=cov2) for s, d in zip(src, dst)]
    h_est = geo.estimate_homography_dlt(matches)
    closed = geo.homography_covariance(h_est, matches)

    def pipeline(vec):
        pts = vec.reshape(-1, 4)
        ms = [geo.PointMatch(p[:2], p[2:]) for p in pts]
        return geo.estimate_homography_dlt(ms).h.ravel()

    p0 = np.hstack([np.hstack([s, d]) for s, d in zip(src, dst)])
    step = 1e-6
    jac = np.zeros((9, p0.size))
    for k in range(p0.size):
        dp = np.zeros_like(p0)
        dp[k] = step
        jac[:, k] = (pipeline(p0 + dp) - pipeline(p0 - dp)) / (2 * step)
    cov_fd = jac @ (np.eye(p0.size) * sigma**2) @ jac.T
    assert np.linalg.norm(closed - cov_fd) < 1e-5 * np.linalg.norm(cov_fd)


def test_covariance_against_monte_carlo():
    # rotation-chain homography: a representative camera motion keeps the
    # estimator in its linear regime so the redraw covariance is meaningful
    rng = np.random.default_rng(4)
    k_r = geo.Intrinsics(f=900.0, pp=(640.0, 360.0))
    k_k = geo.Intrinsics(f=1200.0, pp=(640.0, 360.0))
    h_true = geo.compose_rotation_homography(
        k_r, np.eye(3), geo.CameraPose(0.15, -0.08, 1200.0).rotation(), k_k
    ).h
    src = rng.uniform([50, 50], [1230, 670], size=(20, 2))
    dst = geo.apply_homography(h_true, src)
    sigma = 0.5
    cov2 = np.eye(2) * sigma**2
    matches = [geo.PointMatch(s, d, src_cov=cov2, dst_cov=cov2) for s, d in zip(src, dst)]
    h_est = geo.estimate_homography_dlt(matches)
    closed = geo.homography_covariance(h_est, matches)

    draws = np.empty((10_000, 9))
    for i in range(draws.shape[0]):
        noisy = [
            geo.PointMatch(s + rng.normal(0, sigma, 2), d + rng.normal(0, sigma, 2))
            for s, d in zip(src, dst)
        ]
        draws[i] = geo.estimate_homography_dlt(noisy).h.ravel()
    empirical = np.cov(draws.T)
    rel = np.linalg.norm(empirical - closed) / np.linalg.norm(empirical)
    assert rel < 0.15


# ---------------------------------------------------------------------------
# linearize_homography_at
# ---------------------------------------------------------------------------

def finite_difference_jacobian(h, p, step=1e-5):
    j = np.zeros((2, 2))
    for k in range(2):
        dp = np.zeros(2)
        dp[k] = step
        j[:, k] = (geo.apply_homography(h, p + dp) - geo.apply_homography(h, p - dp)) / (
            2 * step
        )
    return j


def test_linearize_identity():
    j = geo.linearize_homography_at(np.eye(3), np.array([37.0, -12.0]))
    assert np.allclose(j, np.eye(2), atol=1e-12)


def test_linearize_pure_scaling():
    h = np.diag([2.5, 2.5, 1.0])
    for p in ([0.0, 0.0], [50.0, -20.0], [123.4, 567.8]):
        j = geo.linearize_homography_at(h, np.array(p))
        assert np.allclose(j, 2.5 * np.eye(2), atol=1e-12)


def test_linearize_matches_finite_differences():
    rng = np.random.default_rng(5)
    for _ in range(1000):
        h = random_homography(rng)
        p = rng.uniform(-300, 300, 2)
        j = geo.linearize_homography_at(h, p)
        j_fd = finite_difference_jacobian(h, p)
        assert np.linalg.norm(j - j_fd) <= 1e-6 * max(np.linalg.norm(j_fd), 1e-12)


def test_linearize_at_infinity():
    h = np.array([[1.0, 0, 0], [0, 1.0, 0], [0.01, 0, 1.0]])
    with pytest.raises(AtInfinity):
        geo.linearize_homography_at(h, np.array([-100.0, 0.0]))


# ---------------------------------------------------------------------------
# compose / decompose
# ---------------------------------------------------------------------------

def test_compose_same_pose_is_identity():
    k = geo.Intrinsics(f=900.0, pp=(320.0, 240.0))
    r = geo.rot_x(0.2) @ geo.rot_y(-0.4)
    h = geo.compose_rotation_homography(k, r, r, k)
    assert np.allclose(h.h, np.eye(3) / np.sqrt(3), atol=1e-12)


def test_compose_pan_moves_principal_point_by_f_tan():
    f = 1000.0
    k = geo.Intrinsics(f=f, pp=(0.0, 0.0))
    pan = 0.1
    h = geo.compose_rotation_homography(
        k, np.eye(3), geo.CameraPose(pan, 0.0, f).rotation(), k
    )
    moved = h.apply(np.array([0.0, 0.0]))
    # pinhole oracle: the panned view's optical axis lands f*tan(pan) off-axis
    assert abs(abs(moved[0]) - f * np.tan(pan)) < 1e-9
    assert abs(moved[1]) < 1e-9


def test_compose_zoom_only_is_pure_scaling():
    pp = (320.0, 240.0)
    k_r = geo.Intrinsics(f=1600.0, pp=pp)
    k_k = geo.Intrinsics(f=800.0, pp=pp)
    h = geo.compose_rotation_homography(k_r, np.eye(3), np.eye(3), k_k)
    # scaling by 2 about the principal point
    expect = np.array([[2.0, 0, -pp[0]], [0, 2.0, -pp[1]], [0, 0, 1.0]])
    assert np.allclose(h.h, geo.normalize_homography(expect), atol=1e-12)


def test_decompose_identity_chain():
    k = geo.Intrinsics(f=750.0, pp=(100.0, 80.0))
    pose = geo.decompose_to_pose(geo.Homography(np.eye(3)), k, k)
    assert pose.pan == pytest.approx(0.0, abs=1e-12)
    assert pose.tilt == pytest.approx(0.0, abs=1e-12)
    assert pose.focal == 750.0


def test_decompose_round_trip():
    k_r = geo.Intrinsics(f=1200.0, pp=(512.0, 384.0))
    rng = np.random.default_rng(6)
    for _ in range(50):
        pan = rng.uniform(-1.2, 1.2)
        tilt = rng.uniform(-0.9, 0.9)
        f_k = rng.uniform(400, 2500)
        k_k = geo.Intrinsics(f=f_k, pp=k_r.pp)
        h = geo.compose_rotation_homography(
            k_r, np.eye(3), geo.CameraPose(pan, tilt, f_k).rotation(), k_k
        )
        pose = geo.decompose_to_pose(h, k_r, k_k)
        assert abs(pose.pan - pan) < 1e-9
        assert abs(pose.tilt - tilt) < 1e-9


def test_decompose_rejects_non_rotation():
    k = geo.Intrinsics(f=1000.0, pp=(0.0, 0.0))
    rng = np.random.default_rng(7)
    h = geo.compose_rotation_homography(
        k, np.eye(3), geo.CameraPose(0.3, -0.2, 1000.0).rotation(), k
    )
    noisy = h.h + 0.1 * np.linalg.norm(h.h) * rng.standard_normal((3, 3))
    with pytest.raises((NotARotation, DegenerateConfiguration)):
        geo.decompose_to_pose(geo.Homography(noisy), k, k)


# ---------------------------------------------------------------------------
# intrinsics_from_homography
# ---------------------------------------------------------------------------

def test_focal_recovery_zoom_only():
    pp = (640.0, 360.0)
    k_r = geo.Intrinsics(f=800.0, pp=pp)
    k_t = geo.Intrinsics(f=1500.0, pp=pp)
    h = geo.compose_rotation_homography(k_r, np.eye(3), np.eye(3), k_t)
    rec = geo.intrinsics_from_homography(h, k_r)
    assert rec.f == pytest.approx(1500.0, rel=1e-6)
    assert rec.pp == pp


def test_focal_recovery_identity():
    k_r = geo.Intrinsics(f=800.0, pp=(10.0, 20.0))
    rec = geo.intrinsics_from_homography(geo.Homography(np.eye(3)), k_r)
    assert rec.f == pytest.approx(800.0, rel=1e-9)


def test_focal_recovery_pan_tilt_zoom_chain():
    # target focal mirrors the reported zoom experiment: truth 2085 px
    pp = (384.0, 288.0)
    k_r = geo.Intrinsics(f=700.0, pp=pp)
    f_t = 2085.0
    k_t = geo.Intrinsics(f=f_t, pp=pp)
    h = geo.compose_rotation_homography(
        k_r, np.eye(3), geo.CameraPose(0.35, -0.15, f_t).rotation(), k_t
    )
    rec = geo.intrinsics_from_homography(h, k_r)
    assert abs(rec.f - f_t) / f_t < 0.01


def test_focal_recovery_rejects_non_conjugate():
    k_r = geo.Intrinsics(f=800.0, pp=(0.0, 0.0))
    h = geo.Homography(np.array([[1.0, 0.4, 5.0], [0.0, 2.0, -3.0], [1e-4, 2e-4, 1.0]]))
    with pytest.raises(NotARotation):
        geo.intrinsics_from_homography(h, k_r)
