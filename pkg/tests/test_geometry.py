import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from panoptic_vo.errors import DimensionMismatch, NonPositiveDepth, NonPositiveInverseDepth
from panoptic_vo.geometry import (
    CameraIntrinsics,
    SE3Pose,
    Twist,
    correspondence_field,
    induced_flow,
    pixel_grid,
    project,
    se3_exp,
    se3_log,
    se3_retract,
    skew,
    unproject,
)

K100 = CameraIntrinsics(fx=100.0, fy=100.0, cx=50.0, cy=50.0, width=101, height=101)


def _series_exp(xi, terms=10):
    """Truncated power series of the 4x4 twist matrix."""
    A = np.zeros((4, 4))
    A[:3, :3] = skew(xi[:3])
    A[:3, 3] = xi[3:]
    out = np.eye(4)
    term = np.eye(4)
    for k in range(1, terms):
        term = term @ A / k
        out = out + term
    return out


def _random_pose(rng, rot_scale=1.0, trans_scale=1.0):
    omega = rng.normal(size=3)
    omega *= rot_scale * rng.uniform(0, 1) / np.linalg.norm(omega)
    return se3_exp(np.concatenate([omega, trans_scale * rng.normal(size=3)]))


finite_floats = st.floats(-2.0, 2.0, allow_nan=False)
twists = st.lists(finite_floats, min_size=6, max_size=6).map(np.array)


class TestExpLog:
    def test_zero_twist_is_identity(self):
        g = se3_exp(np.zeros(6))
        np.testing.assert_array_equal(g.matrix(), np.eye(4))

    def test_quarter_turn_about_z(self):
        g = se3_exp(Twist([0, 0, math.pi / 2], [0, 0, 0]))
        expected = np.array([[0, -1, 0], [1, 0, 0], [0, 0, 1]], dtype=float)
        np.testing.assert_allclose(g.R, expected, atol=1e-15)
        np.testing.assert_allclose(g.translation, 0.0, atol=1e-15)

    def test_matches_truncated_series(self):
        xi = np.array([0.1, 0.2, 0.3, 1.0, 2.0, 3.0])
        np.testing.assert_allclose(se3_exp(xi).matrix(), _series_exp(xi), atol=1e-10)

    @pytest.mark.parametrize("scale", [1e-9, 1e-4, 5e-3, 2e-2, 0.5])
    def test_series_agreement_across_angle_regimes(self, scale):
        rng = np.random.default_rng(7)
        xi = rng.normal(size=6) * scale
        np.testing.assert_allclose(se3_exp(xi).matrix(), _series_exp(xi, 20), atol=1e-14)

    def test_rotation_angle_equals_omega_norm(self):
        omega = np.array([0.3, -0.4, 1.2])
        g = se3_exp(np.concatenate([omega, [1, 1, 1]]))
        angle = 2 * math.acos(min(1.0, abs(g.rotation[0])))
        assert angle == pytest.approx(np.linalg.norm(omega), abs=1e-12)

    @settings(max_examples=200, deadline=None)
    @given(twists)
    def test_log_inverts_exp(self, xi):
        if np.linalg.norm(xi[:3]) >= math.pi - 0.1:
            xi = xi.copy()
            xi[:3] *= (math.pi - 0.2) / np.linalg.norm(xi[:3])
        back = se3_log(se3_exp(xi)).as_vector()
        np.testing.assert_allclose(back, xi, atol=1e-9)


class TestGroup:
    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_associative_identity_inverse(self, seed):
        rng = np.random.default_rng(seed)
        a, b, c = (_random_pose(rng, 3.0) for _ in range(3))
        lhs = (a @ b) @ c
        rhs = a @ (b @ c)
        np.testing.assert_allclose(lhs.matrix(), rhs.matrix(), atol=1e-12)
        np.testing.assert_allclose((a @ SE3Pose.identity()).matrix(), a.matrix(), atol=1e-15)
        np.testing.assert_allclose((a @ a.inverse()).matrix(), np.eye(4), atol=1e-12)
        np.testing.assert_allclose(
            (a @ b).inverse().matrix(), (b.inverse() @ a.inverse()).matrix(), atol=1e-12)

    def test_quaternion_stays_unit(self):
        rng = np.random.default_rng(0)
        g = SE3Pose.identity()
        for _ in range(1000):
            g = _random_pose(rng) @ g
        assert abs(np.linalg.norm(g.rotation) - 1.0) < 1e-9

    def test_from_matrix_round_trip(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            g = _random_pose(rng, 3.1)
            np.testing.assert_allclose(SE3Pose.from_matrix(g.matrix()).matrix(), g.matrix(), atol=1e-12)


class TestRetract:
    def test_zero_twist(self):
        g = _random_pose(np.random.default_rng(1))
        np.testing.assert_allclose(se3_retract(g, np.zeros(6)).matrix(), g.matrix(), atol=1e-15)

    def test_identity_base(self):
        xi = np.array([0.2, -0.1, 0.05, 0.3, 0.0, -1.0])
        np.testing.assert_allclose(
            se3_retract(SE3Pose.identity(), xi).matrix(), se3_exp(xi).matrix(), atol=1e-15)

    def test_is_left_multiplication(self):
        rng = np.random.default_rng(2)
        g = _random_pose(rng)
        xi = rng.normal(size=6) * 0.1
        np.testing.assert_allclose(
            se3_retract(g, xi).matrix(), se3_exp(xi).matrix() @ g.matrix(), atol=1e-13)

    def test_small_step_undone_by_negative(self):
        rng = np.random.default_rng(4)
        g = _random_pose(rng)
        xi = rng.normal(size=6)
        xi *= 1e-6 / np.linalg.norm(xi)
        back = se3_retract(se3_retract(g, xi), -xi)
        np.testing.assert_allclose(back.matrix(), g.matrix(), atol=1e-9)


class TestCamera:
    def test_optical_axis(self):
        np.testing.assert_array_equal(project(K100, [0, 0, 2]), [50, 50])

    def test_off_axis(self):
        # 100 * 1 / 2 + 50
        np.testing.assert_allclose(project(K100, [1, 0, 2]), [100, 50])

    def test_zero_depth_raises(self):
        with pytest.raises(NonPositiveDepth):
            project(K100, [1, 1, 0])

    def test_unproject_center(self):
        np.testing.assert_allclose(unproject(K100, [50, 50], 0.5), [0, 0, 2])

    def test_unproject_off_axis(self):
        np.testing.assert_allclose(unproject(K100, [100, 50], 0.5), [1, 0, 2])

    def test_unproject_nonpositive_raises(self):
        with pytest.raises(NonPositiveInverseDepth):
            unproject(K100, [1, 1], 0.0)

    @settings(max_examples=300, deadline=None)
    @given(st.floats(0, 100), st.floats(0, 100), st.floats(0.01, 100))
    def test_round_trip(self, u, v, d):
        back = project(K100, unproject(K100, [u, v], d))
        np.testing.assert_allclose(back, [u, v], rtol=1e-10, atol=1e-10)


class TestCorrespondence:
    K = CameraIntrinsics(fx=40.0, fy=42.0, cx=15.5, cy=11.0, width=32, height=24)

    def test_identity_relative_pose(self):
        rng = np.random.default_rng(0)
        g = _random_pose(rng)
        depth = rng.uniform(0.1, 1.0, size=self.K.shape)
        p, valid = correspondence_field(self.K, g, g, depth)
        assert valid.all()
        np.testing.assert_allclose(p, pixel_grid(24, 32), atol=1e-12)

    def test_planar_shift(self):
        t, z = 0.25, 5.0
        pose_j = SE3Pose(np.array([1.0, 0, 0, 0]), [t, 0, 0])
        depth = np.full(self.K.shape, 1 / z)
        p, _ = correspondence_field(self.K, SE3Pose.identity(), pose_j, depth)
        expected = pixel_grid(24, 32) + np.array([self.K.fx * t / z, 0.0])
        np.testing.assert_allclose(p, expected, atol=1e-12)
        np.testing.assert_allclose(induced_flow(p), np.broadcast_to([2.0, 0.0], p.shape), atol=1e-12)

    def test_half_turn_about_y_is_behind(self):
        flip = se3_exp([0, math.pi, 0, 0, 0, 0])
        depth = np.full(self.K.shape, 0.5)
        p, valid = correspondence_field(self.K, SE3Pose.identity(), flip, depth)
        assert not valid.any()
        assert np.all(np.isfinite(p))

    def test_out_of_bounds_marked_invalid(self):
        pose_j = SE3Pose(np.array([1.0, 0, 0, 0]), [1.0, 0, 0])
        depth = np.full(self.K.shape, 1.0)  # 40 px shift: every pixel leaves the image
        _, valid = correspondence_field(self.K, SE3Pose.identity(), pose_j, depth)
        assert not valid.any()

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            correspondence_field(self.K, SE3Pose.identity(), SE3Pose.identity(), np.ones((3, 3)))

    def test_induced_flow_inverse(self):
        rng = np.random.default_rng(5)
        p = rng.normal(size=(24, 32, 2)) * 10
        np.testing.assert_allclose(induced_flow(p) + pixel_grid(24, 32), p, atol=1e-12)
        np.testing.assert_array_equal(induced_flow(pixel_grid(24, 32)), 0.0)

    def test_composition_through_middle_frame(self):
        # a fronto-parallel plane seen from three poses; chaining i->j->k at
        # grid points equals i->k because depth_j is rendered from the same plane
        K = self.K
        n, offset = np.array([0.0, 0.0, 1.0]), 6.0  # world plane z = 6
        poses = [SE3Pose.identity(),
                 se3_exp([0.0, 0.01, 0.0, -0.05, 0.0, 0.0]),
                 se3_exp([0.0, -0.02, 0.01, -0.1, 0.02, 0.1])]

        def plane_depth(g):
            # inverse depth per pixel of the plane n.X = offset seen by camera g
            c_w = g.inverse()
            grid = pixel_grid(K.height, K.width)
            rays = np.stack([(grid[..., 0] - K.cx) / K.fx, (grid[..., 1] - K.cy) / K.fy,
                             np.ones(K.shape)], -1)
            rays_w = rays @ c_w.R.T
            origin = c_w.translation
            t = (offset - n @ origin) / (rays_w @ n)
            return 1.0 / t  # z of a unit-z ray equals its parameter

        d = [plane_depth(g) for g in poses]
        # pick source pixels in frame 1 at exact grid points, go back to 0 via 1->0
        p_10, _ = correspondence_field(K, poses[1], poses[0], d[1])
        p_12, _ = correspondence_field(K, poses[1], poses[2], d[1])
        # the frame-0 point at p_10 lands at p_12 in frame 2; evaluate i->k there
        X0 = np.stack([(p_10[..., 0] - K.cx) / K.fx, (p_10[..., 1] - K.cy) / K.fy, np.ones(K.shape)], -1)
        c_w = poses[0].inverse()
        t = (offset - n @ c_w.translation) / ((X0 @ c_w.R.T) @ n)
        X0 = X0 * t[..., None]
        X2 = poses[2].compose(poses[0].inverse()).act(X0)
        direct = np.stack([K.fx * X2[..., 0] / X2[..., 2] + K.cx, K.fy * X2[..., 1] / X2[..., 2] + K.cy], -1)
        np.testing.assert_allclose(direct, p_12, atol=1e-6)
