"""Camera model and floor-intersection math.

The round-trip tests treat forward projection as the oracle: distort then
undistort must return the start point, and back-projection of a projected
floor point must recover it exactly.
"""

import numpy as np
import pytest

from nodeloc.geometry import (
    BehindCameraError,
    CameraIntrinsics,
    DegenerateRayError,
    FloorModel,
    GeometryError,
    RigidTransform,
    UndistortDivergenceError,
    camera_to_world,
    distort_pixel,
    intersect_floor,
    intrinsics_from_text,
    intrinsics_to_text,
    pixel_to_unit_plane,
    project_point,
    quat_from_rotation,
    rotation_from_quat,
    rot_x,
    rot_y,
    rot_z,
    undistort_image,
    undistort_pixel,
)


def make_cam(**kw):
    defaults = dict(
        fx_px=600.0, fy_px=600.0, cx_px=320.0, cy_px=240.0,
        radial_coeffs=(0.0, 0.0, 0.0), tangential_coeffs=(0.0, 0.0),
        width_px=640, height_px=480,
    )
    defaults.update(kw)
    return CameraIntrinsics(**defaults)


class TestIntrinsicsValidation:
    def test_negative_focal_rejected(self):
        with pytest.raises(GeometryError):
            make_cam(fx_px=-10.0)

    def test_principal_point_outside_sensor_rejected(self):
        with pytest.raises(GeometryError):
            make_cam(cx_px=900.0)

    def test_text_round_trip(self):
        k = make_cam(radial_coeffs=(-0.1, 0.02, -0.003), tangential_coeffs=(1e-4, -2e-4))
        k2 = intrinsics_from_text(intrinsics_to_text(k))
        assert k2 == k

    def test_text_unknown_key_line_number(self):
        with pytest.raises(GeometryError, match="line 2"):
            intrinsics_from_text("fx = 600\nbogus = 1\n")


class TestRigidTransform:
    def test_rotation_validation(self):
        with pytest.raises(GeometryError):
            RigidTransform(np.eye(3) * 1.001, np.zeros(3))

    def test_reflection_rejected(self):
        m = np.diag([1.0, 1.0, -1.0])
        with pytest.raises(GeometryError):
            RigidTransform(m, np.zeros(3))

    def test_compose_associative(self):
        rng = np.random.default_rng(3)
        ts = [
            RigidTransform(
                rot_z(a) @ rot_x(b), rng.normal(size=3)
            )
            for a, b in rng.normal(size=(3, 2))
        ]
        p = rng.normal(size=3)
        left = ts[0].compose(ts[1]).compose(ts[2]).apply(p)
        right = ts[0].compose(ts[1].compose(ts[2])).apply(p)
        np.testing.assert_allclose(left, right, atol=1e-12)

    def test_inverse_gives_identity(self):
        t = RigidTransform(rot_z(0.7) @ rot_y(-0.2), np.array([1.0, -2.0, 0.5]))
        ident = t.compose(t.inverse())
        np.testing.assert_allclose(ident.rotation, np.eye(3), atol=1e-9)
        np.testing.assert_allclose(ident.translation, 0.0, atol=1e-9)

    def test_quaternion_round_trip(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            r = rot_z(rng.uniform(-np.pi, np.pi)) @ rot_x(rng.uniform(-np.pi, np.pi)) @ rot_y(
                rng.uniform(-np.pi, np.pi)
            )
            q = quat_from_rotation(r)
            np.testing.assert_allclose(rotation_from_quat(q), r, atol=1e-12)
            assert q[0] >= 0


class TestUndistortPixel:
    def test_principal_point_fixed(self):
        k = make_cam(radial_coeffs=(-0.2, 0.05, 0.0), tangential_coeffs=(1e-3, -1e-3))
        out = undistort_pixel(np.array([320.0, 240.0]), k)
        np.testing.assert_allclose(out, [320.0, 240.0], atol=1e-9)

    def test_identity_model(self):
        out = undistort_pixel(np.array([100.0, 200.0]), make_cam())
        np.testing.assert_allclose(out, [100.0, 200.0], atol=1e-9)

    def test_inverts_forward_model(self):
        # forward-distort a known ideal pixel, then undo it
        k = make_cam(radial_coeffs=(-0.1, 0.0, 0.0))
        distorted = distort_pixel(np.array([400.0, 300.0]), k)
        out = undistort_pixel(distorted, k)
        assert np.hypot(out[0] - 400.0, out[1] - 300.0) < 0.05

    def test_full_sensor_round_trip(self):
        # |k1| up to 0.3 plus mild higher orders everywhere on the sensor
        for k1 in (-0.3, -0.1, 0.1, 0.3):
            k = make_cam(radial_coeffs=(k1, 0.01, 0.0), tangential_coeffs=(5e-4, -5e-4))
            us = np.linspace(0, 639, 12)
            vs = np.linspace(0, 479, 9)
            for u in us:
                for v in vs:
                    ideal = np.array([u, v])
                    p = distort_pixel(ideal, k)
                    back = undistort_pixel(p, k)
                    assert np.hypot(*(back - ideal)) < 0.05

    def test_extreme_distortion_raises(self):
        k = make_cam(radial_coeffs=(-5.0, 0.0, 0.0))
        with pytest.raises(UndistortDivergenceError):
            undistort_pixel(np.array([0.0, 0.0]), k)


class TestUndistortImage:
    def test_zero_coefficients_identity(self):
        rng = np.random.default_rng(0)
        img = rng.integers(0, 256, (480, 640), dtype=np.uint8)
        out = undistort_image(img, make_cam())
        np.testing.assert_array_equal(out, img)

    def test_constant_image_stays_constant(self):
        k = make_cam(radial_coeffs=(-0.1, 0.0, 0.0))
        img = np.full((480, 640), 77, np.uint8)
        out = undistort_image(img, k)
        # interior pixels sample inside the source; border may fall outside
        assert (out[40:-40, 40:-40] == 77).all()

    def test_dimension_mismatch(self):
        with pytest.raises(GeometryError):
            undistort_image(np.zeros((100, 100), np.uint8), make_cam())

    def test_straightens_rendered_grid(self):
        # vertical dark lines, rendered through the forward model, come out
        # straight: the undistorted dark pixels of one line share a column
        k = make_cam(radial_coeffs=(-0.1, 0.0, 0.0))
        ideal_lines = range(64, 640, 64)
        img = np.full((480, 640), 255, np.uint8)
        us, vs = np.meshgrid(np.arange(640, dtype=float), np.arange(480, dtype=float))
        from nodeloc.geometry import undistort_normalized

        # paint pixels whose undistorted x-position is within 1 px of a line
        norm = np.stack([(us - k.cx_px) / k.fx_px, (vs - k.cy_px) / k.fy_px], axis=-1)
        ideal = undistort_normalized(norm, k)
        ix = ideal[..., 0] * k.fx_px + k.cx_px
        for line_x in ideal_lines:
            img[np.abs(ix - line_x) <= 1.0] = 0
        out = undistort_image(img, k)
        for line_x in ideal_lines:
            ys, xs = np.nonzero(out[20:-20, line_x - 8 : line_x + 9] < 128)
            assert xs.size > 0
            spread = xs.max() - xs.min()
            assert spread <= 2  # straight within a pixel


class TestProjectionChain:
    def test_unit_plane_principal_point(self, cam_clean):
        np.testing.assert_allclose(
            pixel_to_unit_plane(np.array([320.0, 240.0]), cam_clean), [0.0, 0.0, 1.0]
        )

    def test_unit_plane_one_focal_length(self):
        k = make_cam(fx_px=600.0, cx_px=320.0)
        out = pixel_to_unit_plane(np.array([920.0, 240.0]), k)
        np.testing.assert_allclose(out, [1.0, 0.0, 1.0])

    def test_unit_plane_direct_substitution(self):
        k = make_cam(fx_px=600.0, fy_px=500.0, cx_px=320.0, cy_px=240.0)
        out = pixel_to_unit_plane(np.array([20.0, 740.0]), k)
        np.testing.assert_allclose(out, [-0.5, 1.0, 1.0])

    def test_camera_to_world_identity(self):
        p = np.array([0.3, -0.2, 1.4])
        np.testing.assert_allclose(camera_to_world(p, RigidTransform.identity()), p)

    def test_camera_to_world_translation(self):
        t = RigidTransform(np.eye(3), np.array([1.0, 2.0, 3.0]))
        np.testing.assert_allclose(camera_to_world(np.array([0.0, 0.0, 1.0]), t), [1, 2, 4])

    def test_camera_to_world_yaw_then_shift(self):
        # hand-composed: 90 deg yaw sends x to y, then translate
        t = RigidTransform(rot_z(np.pi / 2), np.array([5.0, -1.0, 2.0]))
        out = camera_to_world(np.array([1.0, 0.0, 0.0]), t)
        np.testing.assert_allclose(out, [5.0, 0.0, 2.0], atol=1e-12)

    def test_intersect_floor_straight_down(self):
        out = intersect_floor(
            np.array([2.0, 3.0, 0.5]), np.array([2.0, 3.0, 1.0]), FloorModel(0.0)
        )
        np.testing.assert_allclose(out, [2.0, 3.0, 0.0])

    def test_intersect_floor_oblique(self):
        # c_0=(0,0,2), c_w=(1,0,1): t = (0-2)/(2-1) = -2, hit (2,0,0);
        # the hit lies on the c_0->c_w line and at z exactly 0
        out = intersect_floor(np.array([1.0, 0.0, 1.0]), np.array([0.0, 0.0, 2.0]), FloorModel(0.0))
        np.testing.assert_allclose(out, [2.0, 0.0, 0.0])
        assert out[2] == 0.0

    def test_intersect_floor_parallel_ray(self):
        with pytest.raises(DegenerateRayError):
            intersect_floor(np.array([1.0, 0.0, 1.0]), np.array([0.0, 0.0, 1.0]), FloorModel(0.0))

    def test_project_on_axis(self, cam_clean):
        pose = RigidTransform(np.diag([1.0, -1.0, -1.0]), np.array([0.0, 0.0, 1.0]))
        pix = project_point(np.array([0.0, 0.0, 0.0]), pose, cam_clean)
        np.testing.assert_allclose(pix, [320.0, 240.0], atol=1e-12)

    def test_project_behind_camera(self, cam_clean):
        pose = RigidTransform(np.diag([1.0, -1.0, -1.0]), np.array([0.0, 0.0, 1.0]))
        with pytest.raises(BehindCameraError):
            project_point(np.array([0.0, 0.0, 5.0]), pose, cam_clean)

    def test_project_unproject_depth_round_trip(self, cam_clean):
        rng = np.random.default_rng(7)
        pose = RigidTransform(rot_z(0.3) @ rot_x(2.9), np.array([0.4, -0.2, 1.3]))
        for _ in range(20):
            p_c = np.array([rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), rng.uniform(0.5, 3.0)])
            p_w = pose.apply(p_c)
            pix = project_point(p_w, pose, cam_clean)
            ray = pixel_to_unit_plane(pix, cam_clean)
            np.testing.assert_allclose(ray * p_c[2], p_c, atol=1e-9)


def random_down_pose(rng):
    """Camera above the floor, tilted at most ~35 deg from straight down."""
    base = np.diag([1.0, -1.0, -1.0])
    r = (
        rot_z(rng.uniform(-np.pi, np.pi))
        @ rot_y(rng.uniform(-0.6, 0.6))
        @ rot_x(rng.uniform(-0.6, 0.6))
        @ base
    )
    t = np.array([rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(0.4, 3.0)])
    return RigidTransform(r, t)


class TestFloorRoundTrip:
    def test_backprojection_recovers_floor_points(self, cam_clean):
        """1000 randomized project -> back-project round trips within 1e-6 m."""
        rng = np.random.default_rng(42)
        floor = FloorModel(0.0)
        done = 0
        while done < 1000:
            pose = random_down_pose(rng)
            p = np.array([
                pose.translation[0] + rng.uniform(-0.8, 0.8),
                pose.translation[1] + rng.uniform(-0.8, 0.8),
                0.0,
            ])
            try:
                pix = project_point(p, pose, cam_clean)
            except BehindCameraError:
                continue
            back = intersect_floor(
                camera_to_world(pixel_to_unit_plane(pix, cam_clean), pose),
                pose.translation,
                floor,
            )
            np.testing.assert_allclose(back, p, atol=1e-6)
            assert abs(back[2] - floor.height_m) < 1e-12
            done += 1
