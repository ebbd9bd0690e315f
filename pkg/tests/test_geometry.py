"""Geometry tests against hand-multiplied matrices and direct pinhole formulas."""

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from sklearn.exceptions import NotFittedError

from sim2road.exceptions import BehindCameraError, CalibrationError, DegenerateGeometryError, InvalidArgumentError
from sim2road.geometry import (
    Box3D,
    CameraModel,
    GroundPlane,
    GroundPlaneFitter,
    box_corners_world,
    fit_ground_plane,
    project_points,
    projected_aabb,
    rotation_matrix,
    unproject_points,
)

angles = st.floats(-math.pi, math.pi, allow_nan=False)


def _rx(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def _ry(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def _rz(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


class TestRotationMatrix:
    def test_identity(self):
        np.testing.assert_array_equal(rotation_matrix(0, 0, 0), np.eye(3))

    def test_quarter_turn_about_z(self):
        np.testing.assert_allclose(rotation_matrix(0, 0, math.pi / 2) @ [1, 0, 0], [0, 1, 0], atol=1e-15)

    def test_matches_product_of_elementary_rotations(self):
        roll, pitch, yaw = math.pi / 6, math.pi / 4, math.pi / 3
        expected = _rx(roll) @ _ry(pitch) @ _rz(yaw)
        R = rotation_matrix(roll, pitch, yaw)
        np.testing.assert_allclose(R, expected, atol=1e-15)
        np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
        assert abs(np.linalg.det(R) - 1.0) < 1e-12

    @given(angles, angles, angles)
    def test_orthonormal(self, roll, pitch, yaw):
        R = rotation_matrix(roll, pitch, yaw)
        np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-12)
        np.testing.assert_allclose(R, _rx(roll) @ _ry(pitch) @ _rz(yaw), atol=1e-14)

    def test_rejects_non_finite(self):
        with pytest.raises(InvalidArgumentError):
            rotation_matrix(0.0, float("nan"), 0.0)


class TestBox3D:
    def test_yaw_is_wrapped(self):
        assert Box3D("Car", 4, 2, 1.5, yaw=3 * math.pi / 2).yaw == pytest.approx(-math.pi / 2)

    @pytest.mark.parametrize("field", ["length", "width", "height"])
    def test_rejects_non_positive_dimensions(self, field):
        kwargs = {"length": 4.0, "width": 2.0, "height": 1.5, field: 0.0}
        with pytest.raises(InvalidArgumentError):
            Box3D("Car", **kwargs)

    def test_rejects_confidence_outside_unit_interval(self):
        with pytest.raises(InvalidArgumentError):
            Box3D("Car", 4, 2, 1.5, confidence=1.2)


class TestCorners:
    def test_unit_cube(self):
        corners = box_corners_world(Box3D("Car", 1, 1, 1))
        expected = [
            [0.5, 0.5, 0], [-0.5, 0.5, 0], [-0.5, -0.5, 0], [0.5, -0.5, 0],
            [0.5, 0.5, 1], [-0.5, 0.5, 1], [-0.5, -0.5, 1], [0.5, -0.5, 1],
        ]  # fmt: skip
        np.testing.assert_allclose(corners, expected, atol=1e-15)

    def test_quarter_turn_swaps_xy(self):
        base = box_corners_world(Box3D("Car", 1, 1, 1))
        turned = box_corners_world(Box3D("Car", 1, 1, 1, yaw=math.pi / 2))
        np.testing.assert_allclose(turned[:, 0], -base[:, 1], atol=1e-15)
        np.testing.assert_allclose(turned[:, 1], base[:, 0], atol=1e-15)

    def test_matches_brute_force_transform(self):
        box = Box3D("Car", 4, 2, 1.5, (10, 5, 0), math.pi / 6)
        c, s = math.cos(math.pi / 6), math.sin(math.pi / 6)
        expected = []
        for sx, sy, z in [(1, 1, 0), (-1, 1, 0), (-1, -1, 0), (1, -1, 0), (1, 1, 1.5), (-1, 1, 1.5), (-1, -1, 1.5), (1, -1, 1.5)]:
            x, y = 2.0 * sx, 1.0 * sy
            expected.append([10 + c * x - s * y, 5 + s * x + c * y, z])
        np.testing.assert_allclose(box_corners_world(box), expected, atol=1e-12)

    def test_tilted_plane_keeps_bottom_on_plane(self):
        plane = GroundPlane.from_angles(0.05, -0.03)
        x, y = 12.0, -3.0
        box = Box3D("Car", 4, 2, 1.5, (x, y, plane.height_at(x, y)), 0.7)
        corners = box_corners_world(box, plane)
        np.testing.assert_allclose(plane.signed_distance(corners[:4]), 0.0, atol=1e-12)
        np.testing.assert_allclose(plane.signed_distance(corners[4:]), 1.5, atol=1e-12)


class TestProjection:
    def test_principal_ray(self, simple_camera):
        np.testing.assert_allclose(project_points([[0, 0, 5]], simple_camera), [[960, 540, 5]])

    def test_off_axis_point(self, simple_camera):
        # u = fx * x / z + cx = 1000 * 1 / 5 + 960
        np.testing.assert_allclose(project_points([[1, 0, 5]], simple_camera), [[1160, 540, 5]])

    def test_behind_camera_reports_index(self, simple_camera):
        with pytest.raises(BehindCameraError) as info:
            project_points([[0, 0, 5], [0, 0, -1]], simple_camera)
        assert info.value.index == 1

    @given(
        st.floats(-20, 20),
        st.floats(-20, 20),
        st.floats(0.5, 200),
    )
    def test_round_trip(self, x, y, z):
        cam = CameraModel.from_parameters(1200, 1100, 950, 530, rotation_matrix(0.1, -0.2, 0.3), [1.0, -2.0, 3.0])
        world = cam.camera_to_world(np.array([[x, y, z]]))
        back = unproject_points(project_points(world, cam), cam)
        np.testing.assert_allclose(back, world, atol=1e-9)


class TestProjectedAabb:
    def test_cube_on_principal_ray(self, simple_camera):
        # flat plane with identity extrinsics: z_world is the optical axis,
        # so lay a unit cube from depth 9.5 to 10.5 via its bottom center.
        box = Box3D("Car", 1, 1, 1, (0, 0, 9.5))
        rect = projected_aabb(box, GroundPlane.flat(), simple_camera)
        corners = box_corners_world(box)
        u = 1000 * corners[:, 0] / corners[:, 2] + 960
        v = 1000 * corners[:, 1] / corners[:, 2] + 540
        np.testing.assert_allclose(rect.as_array(), [u.min(), v.min(), u.max(), v.max()], atol=1e-9)
        assert rect.width == pytest.approx(1000 / 9.5)
        cx, cy = rect.center
        assert abs(cx - 960) < 1 and abs(cy - 540) < 1

    def test_behind_camera(self, simple_camera):
        with pytest.raises(BehindCameraError):
            projected_aabb(Box3D("Car", 1, 1, 1, (0, 0, -5)), GroundPlane.flat(), simple_camera)


class TestCameraModel:
    def test_rejects_reflection(self):
        E = np.diag([1.0, 1.0, -1.0, 1.0])
        with pytest.raises(CalibrationError, match="determinant"):
            CameraModel(np.eye(3), E)

    def test_rejects_skew(self):
        K = np.array([[1000.0, 1.0, 960.0], [0.0, 1000.0, 540.0], [0.0, 0.0, 1.0]])
        with pytest.raises(CalibrationError):
            CameraModel(K, np.eye(4))

    def test_arrays_are_read_only(self, simple_camera):
        with pytest.raises(ValueError):
            simple_camera.intrinsics[0, 0] = 1.0

    def test_position_is_camera_center(self):
        cam = CameraModel.from_parameters(1000, 1000, 960, 540, rotation_matrix(0.2, 0.1, -0.4), [1.0, 2.0, 3.0])
        np.testing.assert_allclose(cam.world_to_camera(cam.position[None]), [[0, 0, 0]], atol=1e-12)


class TestGroundPlane:
    def test_flat_points(self):
        pts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [3, 2, 0]], dtype=float)
        plane = fit_ground_plane(pts)
        np.testing.assert_allclose(plane.normal, [0, 0, 1], atol=1e-15)
        assert plane.pitch == 0.0 and plane.roll == 0.0

    def test_recovers_pitch(self):
        gx, gy = np.meshgrid(np.linspace(-10, 10, 7), np.linspace(-10, 10, 5))
        grid = np.stack([gx.ravel(), gy.ravel(), np.zeros(gx.size)], axis=1)
        pts = grid @ _ry(0.1).T + [0.0, 0.0, 2.0]
        plane = fit_ground_plane(pts)
        assert abs(plane.pitch - 0.1) < 1e-9
        assert abs(plane.roll) < 1e-9

    @given(st.floats(-0.3, 0.3), st.floats(-0.3, 0.3), st.floats(-5, 5))
    def test_recovers_angles(self, pitch, roll, offset):
        plane = GroundPlane.from_angles(pitch, roll, offset)
        rng = np.random.default_rng(0)
        xy = rng.uniform(-20, 20, (30, 2))
        pts = np.column_stack([xy, plane.height_at(xy[:, 0], xy[:, 1])])
        fitted = fit_ground_plane(pts)
        assert fitted.pitch == pytest.approx(pitch, abs=1e-9)
        assert fitted.roll == pytest.approx(roll, abs=1e-9)
        assert fitted.offset == pytest.approx(offset, abs=1e-8)

    def test_collinear_points(self):
        with pytest.raises(DegenerateGeometryError):
            fit_ground_plane([[0, 0, 0], [1, 1, 1], [2, 2, 2]])

    def test_vertical_plane(self):
        with pytest.raises(DegenerateGeometryError):
            fit_ground_plane([[0, 0, 0], [0, 1, 0], [0, 0, 1], [0, 1, 1]])

    def test_too_few_points(self):
        with pytest.raises(InvalidArgumentError):
            fit_ground_plane([[0, 0, 0], [1, 0, 0]])

    def test_inconsistent_angles_rejected(self):
        with pytest.raises(InvalidArgumentError):
            GroundPlane((0.0, 0.0, 1.0), 0.0, 0.2, 0.0)


class TestGroundPlaneFitter:
    def test_estimator_api(self):
        plane = GroundPlane.from_angles(0.05, 0.02, 1.0)
        xy = np.random.default_rng(1).uniform(-5, 5, (20, 2))
        pts = np.column_stack([xy, plane.height_at(xy[:, 0], xy[:, 1])])
        est = GroundPlaneFitter().fit(pts)
        assert est.pitch_ == pytest.approx(0.05, abs=1e-9)
        np.testing.assert_allclose(est.predict(pts), 0.0, atol=1e-9)
        np.testing.assert_allclose(est.transform(pts + [0, 0, 0.5]), 0.5, atol=1e-9)
        assert est.score(pts) == pytest.approx(0.0, abs=1e-9)
        assert est.get_params() == {"rank_tol": 1e-12}

    def test_not_fitted(self):
        with pytest.raises(NotFittedError):
            GroundPlaneFitter().predict(np.zeros((3, 3)))
