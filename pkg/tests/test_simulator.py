"""Scenario trajectories, rendering ground-truth consistency, odometry
drift statistics and dataset serialization."""

import os

import numpy as np
import pytest

from nodeloc.floorid import GroundNode, NodeDatabase
from nodeloc.geometry import (
    CameraIntrinsics,
    RigidTransform,
    distort_pixel,
    project_point,
)
from nodeloc.imaging import focus_measure, read_pgm
from nodeloc.simulator import (
    DOWNWARD,
    OdometryStream,
    RenderSettings,
    Scenario,
    Scene,
    SimulatorError,
    aisle_scene,
    brightness_factor,
    generate_trajectory,
    interp_pose_track,
    node_fully_visible,
    read_dataset,
    render_frame,
    synth_odometry,
    write_dataset,
)
from conftest import overhead_pose


class TestScenario:
    def test_unknown_kind(self):
        with pytest.raises(SimulatorError):
            Scenario("moonwalk", 5.0)

    def test_invalid_rate(self):
        with pytest.raises(SimulatorError):
            Scenario("stand", 5.0, frame_rate_hz=0.0)


class TestGenerateTrajectory:
    def test_stand_planar_constant(self):
        scene = aisle_scene(n_nodes=2)
        traj = generate_trajectory(scene, Scenario("stand", 2.0), seed=1)
        assert len(traj) == 10
        xy = np.array([p.translation[:2] for _, p in traj])
        np.testing.assert_allclose(xy, np.tile(xy[0], (len(traj), 1)), atol=1e-12)
        # orientation oscillates
        rots = np.array([p.rotation for _, p in traj])
        assert np.abs(rots - rots[0]).max() > 1e-4

    def test_first_pose_above_node_looking_down(self):
        scene = aisle_scene(n_nodes=3)
        for kind in ("slow-walk", "fast-walk", "crouch-walk", "stand"):
            t0, pose0 = generate_trajectory(scene, Scenario(kind, 4.0), seed=2)[0]
            assert t0 == 0.0
            np.testing.assert_allclose(pose0.translation[:2], [0.0, 0.0], atol=1e-12)
            np.testing.assert_allclose(pose0.rotation, DOWNWARD, atol=1e-9)

    def test_slow_walk_path_length(self):
        scene = aisle_scene(n_nodes=8)
        traj = generate_trajectory(scene, Scenario("slow-walk", 10.0), seed=3)
        xy = np.array([p.translation[:2] for _, p in traj])
        length = np.sum(np.hypot(*np.diff(xy, axis=0).T))
        assert length == pytest.approx(8.0, rel=0.05)

    def test_deterministic(self):
        scene = aisle_scene(n_nodes=4)
        a = generate_trajectory(scene, Scenario("fast-walk", 3.0), seed=9)
        b = generate_trajectory(scene, Scenario("fast-walk", 3.0), seed=9)
        for (ta, pa), (tb, pb) in zip(a, b):
            assert ta == tb
            np.testing.assert_array_equal(pa.translation, pb.translation)
            np.testing.assert_array_equal(pa.rotation, pb.rotation)

    def test_out_of_bounds_rejected(self):
        scene = aisle_scene(n_nodes=2, spacing_m=1.5)
        with pytest.raises(SimulatorError):
            generate_trajectory(scene, Scenario("fast-walk", 60.0), seed=1)

    def test_crouch_profile(self):
        scene = aisle_scene(n_nodes=6)
        traj = generate_trajectory(scene, Scenario("crouch-walk", 8.0), seed=4)
        zs = np.array([p.translation[2] for _, p in traj])
        assert zs[0] == pytest.approx(1.0)
        assert zs[-1] == pytest.approx(0.6, abs=0.05)


class TestRenderFrame:
    def test_empty_scene_noise_floor(self, cam_clean):
        scene = Scene(nodes=NodeDatabase([]), floor_texture_amp=0.0)
        img = render_frame(
            scene, overhead_pose(), cam_clean,
            RenderSettings(motion_blur=0.0, noise_sigma=2.0), frame_seed=5,
        )
        assert img.std() == pytest.approx(2.0, abs=0.5)

    def test_determinism_per_seed(self, one_node_scene, cam):
        settings = RenderSettings()
        a = render_frame(one_node_scene, overhead_pose(), cam, settings, frame_seed=3)
        b = render_frame(one_node_scene, overhead_pose(), cam, settings, frame_seed=3)
        np.testing.assert_array_equal(a, b)
        c = render_frame(one_node_scene, overhead_pose(), cam, settings, frame_seed=4)
        assert (a != c).any()

    def test_photometric_ordering(self, one_node_scene, cam):
        means = []
        for lux in (120.0, 160.0, 300.0, 500.0, 800.0):
            img = render_frame(
                one_node_scene, overhead_pose(), cam,
                RenderSettings(illumination_lux=lux, motion_blur=0.0, noise_sigma=0.0),
            )
            means.append(img.mean())
        assert all(a <= b for a, b in zip(means, means[1:]))

    def test_low_light_mean_level(self, cam_clean):
        scene = Scene(nodes=NodeDatabase([]))
        img = render_frame(
            scene, overhead_pose(), cam_clean,
            RenderSettings(illumination_lux=160.0, motion_blur=0.0, noise_sigma=0.0),
        )
        assert img.mean() == pytest.approx(60.0, abs=10.0)

    def test_camera_below_floor_rejected(self, one_node_scene, cam):
        with pytest.raises(SimulatorError):
            render_frame(
                one_node_scene,
                RigidTransform(DOWNWARD, np.array([0.0, 0.0, -0.1])),
                cam,
                RenderSettings(),
            )

    def test_projected_center_lands_on_artwork(self, one_node_scene, cam):
        """Ground-truth self-consistency: the node center's projected pixel
        (forward distortion applied) falls on the dark center blob."""
        import itertools

        for x, y in itertools.product((0.0, 0.2), (0.0, -0.15)):
            pose = overhead_pose(x, y, 1.0)
            img = render_frame(
                one_node_scene, pose, cam,
                RenderSettings(motion_blur=0.0, noise_sigma=0.0),
            )
            pix = distort_pixel(project_point(np.array([0.0, 0.0, 0.0]), pose, cam), cam)
            assert img[int(round(pix[1])), int(round(pix[0]))] < 80

    def test_blob_centers_match_projection(self, one_node_scene, cam_clean, frontal_frame):
        """Thresholded correlation blobs sit within 0.5 px (at mask scale)
        of the projected grid positions."""
        from nodeloc.geometry import undistort_image
        from nodeloc.gridpose import detect_blob_grid
        from nodeloc.imaging import (
            correlate,
            make_double_kernel,
            morphological_open,
            rescale_signed,
            resize_half,
            threshold_relative,
        )

        pose = overhead_pose()
        roi = frontal_frame[240 - 160 : 240 + 161, 320 - 160 : 320 + 161]
        opened = morphological_open(resize_half(roi), 3, 3)
        mask = threshold_relative(correlate(rescale_signed(opened), make_double_kernel(17)), 0.5)
        grid = detect_blob_grid(mask)
        pitch = one_node_scene.geometry.pitch_m
        worst = 0.0
        for r in (-1, 0, 1):
            for c in (-1, 0, 1):
                true_pix = project_point(np.array([c * pitch, -r * pitch, 0.0]), pose, cam_clean)
                true_mask = (true_pix - np.array([160.0, 80.0]) - 0.5) / 2.0  # frame->roi->mask
                d = np.min(np.hypot(*(grid.centers_px - true_mask).T))
                worst = max(worst, d)
        assert worst < 0.5

    def test_full_blur_fails_gate(self, one_node_scene):
        """blur fraction 1.0 at fast-walk speed smears the whole frame and
        the focus gate rejects it; the sharp render passes. Rendered on a
        quarter-pixel sensor (same field of view) to keep the smear cheap."""
        k_small = CameraIntrinsics(300.0, 300.0, 160.0, 120.0, (0, 0, 0), (0, 0), 320, 240)
        pose = overhead_pose()
        # one fast-walk frame ahead, with the walking bob's vertical motion
        pose_next = RigidTransform(
            overhead_pose().rotation @ np.eye(3), np.array([1.8 * 0.2, 0.0, 1.03])
        )
        sharp = render_frame(
            one_node_scene, pose, k_small,
            RenderSettings(motion_blur=0.0, noise_sigma=0.0),
        )
        blurred = render_frame(
            one_node_scene, pose, k_small,
            RenderSettings(motion_blur=1.0, noise_sigma=0.0),
            pose_next=pose_next,
        )
        assert focus_measure(sharp).is_sharp
        assert not focus_measure(blurred).is_sharp


class TestVisibility:
    def test_overhead_node_visible(self, one_node_scene, cam):
        assert node_fully_visible(one_node_scene, overhead_pose(), cam) == 0

    def test_far_node_not_visible(self, one_node_scene, cam):
        assert node_fully_visible(one_node_scene, overhead_pose(x=3.0), cam) is None

    def test_straight_walk_fraction(self, cam):
        """With 1.5 m spacing and the default lens, 25..75 percent of
        straight-walk frames see a full node."""
        scene = aisle_scene(n_nodes=10)
        traj = generate_trajectory(scene, Scenario("slow-walk", 15.0), seed=5)
        flags = [node_fully_visible(scene, p, cam) is not None for _, p in traj]
        frac = np.mean(flags)
        assert 0.25 <= frac <= 0.75


class TestSynthOdometry:
    def make_truth(self, duration=25.0, rate=5.0):
        n = int(duration * rate) + 1
        out = []
        for i in range(n):
            t = i / rate
            out.append((t, RigidTransform(DOWNWARD, np.array([0.3 * t, 0.0, 1.0]))))
        return out

    def test_zero_sigma_equals_truth(self):
        truth = self.make_truth()
        odo = synth_odometry(truth, 0.0, 0.0, seed=1)
        for t, pose in zip(odo.times_s, odo.poses):
            ref = interp_pose_track([tt for tt, _ in truth], [p for _, p in truth], float(t))
            np.testing.assert_allclose(pose.translation, ref.translation, atol=1e-12)

    def test_first_sample_zero_error(self):
        truth = self.make_truth()
        odo = synth_odometry(truth, 0.05, 0.02, seed=2)
        np.testing.assert_allclose(odo.poses[0].translation, truth[0][1].translation)
        np.testing.assert_allclose(odo.poses[0].rotation, truth[0][1].rotation)

    def test_rate(self):
        truth = self.make_truth(duration=4.0)
        odo = synth_odometry(truth, 0.01, 0.0, seed=3, rate_hz=20.0)
        assert odo.times_s.size == 81
        np.testing.assert_allclose(np.diff(odo.times_s), 0.05)

    def test_random_walk_statistics(self):
        """Planar drift after 25 s of a per-axis 0.02 m/sqrt(s) random walk:
        RMS = sigma * sqrt(2 t) = 0.141 m, checked by Monte Carlo."""
        truth = self.make_truth(duration=25.0)
        finals = []
        for seed in range(200):
            odo = synth_odometry(truth, 0.02, 0.0, seed=seed)
            err = odo.poses[-1].translation[:2] - truth[-1][1].translation[:2]
            finals.append(err)
        rms = float(np.sqrt(np.mean(np.sum(np.square(finals), axis=1))))
        expected = 0.02 * np.sqrt(2 * 25.0)
        assert rms == pytest.approx(expected, rel=0.15)


class TestDataset:
    def build(self, tmp_path, seed=3):
        scene = aisle_scene(n_nodes=3)
        cam = CameraIntrinsics(600.0, 600.0, 320.0, 240.0, (-0.05, 0, 0), (0, 0), 640, 480)
        traj = generate_trajectory(scene, Scenario("stand", 2.0), seed=seed)
        settings = RenderSettings(motion_blur=0.0, noise_sigma=1.0)
        frames = [
            render_frame(scene, pose, cam, settings, frame_seed=seed * 1000 + i)
            for i, (_, pose) in enumerate(traj)
        ]
        odo = synth_odometry(traj, 0.02, 0.01, seed=seed + 1)
        manifest = write_dataset(
            tmp_path,
            frames,
            [t for t, _ in traj],
            [p for _, p in traj],
            odo,
            scene.nodes,
            cam,
            manifest_extra={"seed": seed, "scenario.kind": "stand"},
        )
        return manifest, frames, traj, odo

    def test_file_layout(self, tmp_path):
        self.build(tmp_path / "ds")
        names = sorted(os.listdir(tmp_path / "ds"))
        assert "manifest.txt" in names
        assert "truth.csv" in names and "odometry.csv" in names
        assert "nodes.csv" in names and "intrinsics.txt" in names
        assert sum(n.endswith(".pgm") for n in names) == 10

    def test_load_after_write(self, tmp_path):
        _, frames, traj, odo = self.build(tmp_path / "ds")
        ds = read_dataset(tmp_path / "ds")
        assert len(ds.frame_paths) == 10
        np.testing.assert_allclose(ds.frame_times_s, [t for t, _ in traj], atol=1e-6)
        for pose, (_, ref) in zip(ds.truth_poses, traj):
            np.testing.assert_allclose(pose.translation, ref.translation, atol=1e-6)
            np.testing.assert_allclose(pose.rotation, ref.rotation, atol=1e-6)
        np.testing.assert_array_equal(ds.load_frame(0), frames[0])
        assert len(ds.nodes) == 3
        assert ds.manifest["scenario.kind"] == "stand"

    def test_regeneration_byte_identical(self, tmp_path):
        self.build(tmp_path / "a", seed=6)
        self.build(tmp_path / "b", seed=6)
        for name in sorted(os.listdir(tmp_path / "a")):
            fa = (tmp_path / "a" / name).read_bytes()
            fb = (tmp_path / "b" / name).read_bytes()
            assert fa == fb, f"{name} differs between identical runs"

    def test_length_mismatch_rejected(self, tmp_path):
        scene = aisle_scene(n_nodes=2)
        cam = CameraIntrinsics(600.0, 600.0, 320.0, 240.0, (0, 0, 0), (0, 0), 640, 480)
        odo = OdometryStream(np.array([0.0]), (overhead_pose(),))
        with pytest.raises(SimulatorError):
            write_dataset(
                tmp_path / "x", [np.zeros((480, 640), np.uint8)], [0.0, 0.2],
                [overhead_pose()], odo, scene.nodes, cam,
            )


class TestBrightness:
    def test_anchors(self):
        assert brightness_factor(160.0) == pytest.approx(0.375)
        assert brightness_factor(500.0) == pytest.approx(1.0)
        assert brightness_factor(800.0) >= brightness_factor(500.0)
