import math

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from regalign.errors import DegenerateRotationError, DimensionError
from regalign.geometry import (
    CameraIntrinsics,
    PixelCoord,
    SE3Pose,
    Twist,
    compose,
    inverse,
    se3_exp,
    se3_log,
    warp,
    warp_jacobian_depth,
    warp_jacobian_depth_many,
    warp_jacobian_pose,
    warp_jacobian_pose_many,
    warp_many,
)

from conftest import philox, random_twist

K = CameraIntrinsics(fx=110.0, fy=108.0, cx=63.5, cy=47.5, width=128, height=96)


def test_exp_of_zero_is_identity():
    pose = se3_exp(Twist(np.zeros(3), np.zeros(3)))
    np.testing.assert_array_equal(pose.rotation, np.eye(3))
    np.testing.assert_array_equal(pose.translation, np.zeros(3))


def test_exp_log_roundtrip_random():
    rng = philox(11)
    worst = 0.0
    for _ in range(2000):
        xi = random_twist(rng, max_angle=3.0)
        back = se3_log(se3_exp(Twist.from_array(xi))).as_array()
        worst = max(worst, np.linalg.norm(back - xi) / max(np.linalg.norm(xi), 1e-300))
    assert worst <= 1e-9


def test_exp_rotation_matches_scipy():
    rng = philox(12)
    for _ in range(200):
        xi = random_twist(rng, max_angle=3.0)
        pose = se3_exp(Twist.from_array(xi))
        expected = Rotation.from_rotvec(xi[:3]).as_matrix()
        np.testing.assert_allclose(pose.rotation, expected, atol=1e-12)


def test_exp_translation_small_angle_series_oracle():
    # V = I + B wx + C wx^2 evaluated by a long series at tiny angles; the
    # implementation must agree through its Taylor branch.
    rng = philox(13)
    for scale in (1e-12, 1e-9, 1e-6, 1e-4):
        w = rng.normal(size=3)
        w *= scale / np.linalg.norm(w)
        nu = rng.normal(size=3)
        wx = np.array([[0, -w[2], w[1]], [w[2], 0, -w[0]], [-w[1], w[0], 0]])
        v = np.eye(3)
        term = np.eye(3)
        for n in range(1, 12):
            term = term @ wx / (n + 1)
            v = v + term
        expected = v @ nu
        got = se3_exp(Twist(w, nu)).translation
        np.testing.assert_allclose(got, expected, rtol=1e-12, atol=1e-300)


def test_log_near_pi_matches_quaternion_oracle():
    rng = philox(14)
    for _ in range(50):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        angle = math.pi - 1e-6
        rot = Rotation.from_rotvec(angle * axis)
        pose = SE3Pose(rot.as_matrix(), rng.normal(size=3))
        tw = se3_log(pose)
        assert np.all(np.isfinite(tw.as_array()))
        assert abs(np.linalg.norm(tw.omega) - angle) < 1e-8
        quat_rotvec = rot.as_rotvec()
        np.testing.assert_allclose(tw.omega, quat_rotvec, atol=1e-6)


def test_log_at_pi_reports_degenerate():
    rot = Rotation.from_rotvec([math.pi, 0.0, 0.0]).as_matrix()
    with pytest.raises(DegenerateRotationError):
        se3_log(SE3Pose(rot, np.zeros(3)))


def test_group_laws():
    rng = philox(15)
    for _ in range(100):
        a = se3_exp(Twist.from_array(random_twist(rng, 2.5)))
        b = se3_exp(Twist.from_array(random_twist(rng, 2.5)))
        c = se3_exp(Twist.from_array(random_twist(rng, 2.5)))
        left = compose(compose(a, b), c).matrix()
        right = compose(a, compose(b, c)).matrix()
        assert np.linalg.norm(left - right) <= 1e-12
        ident = compose(a, inverse(a)).matrix()
        assert np.linalg.norm(ident - np.eye(4)) <= 1e-12


def test_long_compose_chain_stays_orthonormal():
    rng = philox(16)
    pose = SE3Pose.identity()
    step = se3_exp(Twist.from_array(random_twist(rng, 0.02)))
    for _ in range(5000):
        pose = compose(step, pose)
    r = pose.rotation
    assert np.linalg.norm(r.T @ r - np.eye(3)) < 1e-9


def test_pose_validation_rejects_sheared_rotation():
    bad = np.eye(3)
    bad[0, 1] = 1e-3
    with pytest.raises(DimensionError):
        SE3Pose(bad, np.zeros(3))


def test_pose_json_roundtrip():
    rng = philox(17)
    pose = se3_exp(Twist.from_array(random_twist(rng, 1.0)))
    again = SE3Pose.from_json(pose.to_json())
    np.testing.assert_allclose(again.matrix(), pose.matrix(), atol=1e-15)
    tw = Twist.from_array(random_twist(rng, 1.0))
    np.testing.assert_array_equal(Twist.from_json(tw.to_json()).as_array(), tw.as_array())


def test_warp_identity_pose_is_identity_mapping():
    x = PixelCoord(40.25, 21.75)
    res = warp(x, 3.7, SE3Pose.identity(), K)
    assert res.valid
    assert abs(res.u - x.u) < 1e-12
    assert abs(res.v - x.v) < 1e-12
    assert abs(res.depth - 3.7) < 1e-12


def test_warp_behind_camera_flagged_not_clamped():
    pose = SE3Pose(np.eye(3), np.array([0.0, 0.0, -5.0]))
    res = warp(PixelCoord(63.5, 47.5), 2.0, pose, K)
    assert not res.valid
    assert res.depth == pytest.approx(-3.0)
    assert math.isnan(res.u)


def test_warp_pure_z_translation_moves_toward_principal_point():
    # Moving the camera forward scales image displacement around (cx, cy)
    # by d/(d - tz); derived from the pinhole model directly.
    d, tz = 4.0, 1.0
    pose = SE3Pose(np.eye(3), np.array([0.0, 0.0, -tz]))
    x = PixelCoord(80.0, 60.0)
    res = warp(x, d, pose, K)
    scale = d / (d - tz)
    assert res.u == pytest.approx(K.cx + (x.u - K.cx) * scale, abs=1e-10)
    assert res.v == pytest.approx(K.cy + (x.v - K.cy) * scale, abs=1e-10)


def test_warp_many_matches_scalar():
    rng = philox(18)
    pose = se3_exp(Twist.from_array(random_twist(rng, 0.3, trans_scale=0.5)))
    uv = rng.uniform([0, 0], [K.width - 1, K.height - 1], size=(64, 2))
    depths = rng.uniform(2.0, 6.0, size=64)
    coords, z, valid = warp_many(uv, depths, pose, K)
    for i in range(64):
        res = warp(PixelCoord(uv[i, 0], uv[i, 1]), depths[i], pose, K)
        assert valid[i] == res.valid
        if res.valid:
            assert coords[i, 0] == pytest.approx(res.u, abs=1e-12)
            assert coords[i, 1] == pytest.approx(res.v, abs=1e-12)
            assert z[i] == pytest.approx(res.depth, abs=1e-12)


def test_translation_x_column_closed_form():
    # At identity pose and the principal point the x-translation column of
    # the pose Jacobian is (fx/d, 0).
    d = 2.5
    jac = warp_jacobian_pose(PixelCoord(K.cx, K.cy), d, SE3Pose.identity(), K)
    np.testing.assert_allclose(jac[:, 3], [K.fx / d, 0.0], atol=1e-12)
    np.testing.assert_allclose(jac[:, 4], [0.0, K.fy / d], atol=1e-12)


def test_depth_scaling_halves_translation_columns():
    x = PixelCoord(K.cx, K.cy)
    j1 = warp_jacobian_pose(x, 2.0, SE3Pose.identity(), K)
    j2 = warp_jacobian_pose(x, 4.0, SE3Pose.identity(), K)
    np.testing.assert_allclose(j2[:, 3:], j1[:, 3:] / 2.0, atol=1e-12)
    # Rotation columns at the principal point are depth-free.
    np.testing.assert_allclose(j2[:, :3], j1[:, :3], atol=1e-12)


def test_depth_jacobian_identity_pose_is_zero():
    # With no relative motion the warp does not depend on depth.
    jd = warp_jacobian_depth(PixelCoord(30.0, 70.0), 3.0, SE3Pose.identity(), K)
    np.testing.assert_allclose(jd, [0.0, 0.0], atol=1e-12)


def test_depth_jacobian_pure_translation_closed_form():
    # du/dd = -fx tx / d^2 under x-translation.
    tx, d = 0.3, 2.0
    pose = SE3Pose(np.eye(3), np.array([tx, 0.0, 0.0]))
    jd = warp_jacobian_depth(PixelCoord(50.0, 40.0), d, pose, K)
    assert jd[0] == pytest.approx(-K.fx * tx / d**2, abs=1e-12)
    assert jd[1] == pytest.approx(0.0, abs=1e-12)


def _fd_pose_jacobian(x, depth, pose, intrinsics, h=1e-6):
    jac = np.zeros((2, 6))
    for k in range(6):
        e = np.zeros(6)
        e[k] = h
        plus = compose(se3_exp(Twist.from_array(e)), pose)
        minus = compose(se3_exp(Twist.from_array(-e)), pose)
        rp = warp(x, depth, plus, intrinsics)
        rm = warp(x, depth, minus, intrinsics)
        jac[0, k] = (rp.u - rm.u) / (2 * h)
        jac[1, k] = (rp.v - rm.v) / (2 * h)
    return jac


def _fd_depth_jacobian(x, depth, pose, intrinsics, h=1e-6):
    rp = warp(x, depth + h, pose, intrinsics)
    rm = warp(x, depth - h, pose, intrinsics)
    return np.array([(rp.u - rm.u) / (2 * h), (rp.v - rm.v) / (2 * h)])


def test_warp_jacobians_match_finite_differences():
    rng = philox(19)
    checked = 0
    while checked < 200:
        pose = se3_exp(Twist.from_array(random_twist(rng, 0.4, trans_scale=0.4)))
        x = PixelCoord(rng.uniform(5, K.width - 5), rng.uniform(5, K.height - 5))
        depth = rng.uniform(2.0, 6.0)
        if not warp(x, depth, pose, K).valid:
            continue
        analytic = warp_jacobian_pose(x, depth, pose, K)
        fd = _fd_pose_jacobian(x, depth, pose, K)
        scale = max(np.abs(fd).max(), 1.0)
        assert np.abs(analytic - fd).max() / scale < 1e-4
        jd = warp_jacobian_depth(x, depth, pose, K)
        fdd = _fd_depth_jacobian(x, depth, pose, K)
        dscale = max(np.abs(fdd).max(), 1.0)
        assert np.abs(jd - fdd).max() / dscale < 1e-4
        checked += 1


def test_vectorized_jacobians_match_scalar():
    rng = philox(20)
    pose = se3_exp(Twist.from_array(random_twist(rng, 0.3, trans_scale=0.3)))
    uv = rng.uniform([2, 2], [K.width - 3, K.height - 3], size=(32, 2))
    depths = rng.uniform(2.0, 5.0, size=32)
    p2 = np.empty((32, 3))
    warp_many(uv, depths, pose, K, transformed_out=p2)
    jp = warp_jacobian_pose_many(p2, K)
    jd = warp_jacobian_depth_many(uv, p2, pose, K)
    for i in range(32):
        x = PixelCoord(uv[i, 0], uv[i, 1])
        np.testing.assert_allclose(jp[i], warp_jacobian_pose(x, depths[i], pose, K), atol=1e-12)
        np.testing.assert_allclose(jd[i], warp_jacobian_depth(x, depths[i], pose, K), atol=1e-12)


def test_intrinsics_halved():
    k2 = K.halved()
    assert (k2.fx, k2.fy, k2.cx, k2.cy) == (55.0, 54.0, 31.75, 23.75)
    assert (k2.width, k2.height) == (64, 48)
