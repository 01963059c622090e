"""Raster primitives against brute-force oracles.

The Laplacian oracle below is an independent dense double-convolution with
explicit loops; correlate is checked bit-for-bit (1e-9) against a nested
loop. Expected values in the simple cases are worked out by hand in the
comments.
"""

import numpy as np
import pytest
from scipy import ndimage

from nodeloc.imaging import (
    ImagingError,
    correlate,
    disc_offsets,
    focus_measure,
    laplacian,
    make_double_kernel,
    morphological_open,
    read_pgm,
    rescale_signed,
    resize_half,
    threshold_relative,
    write_pgm,
)

SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], float) / 4.0
SOBEL_Y = SOBEL_X.T


def conv3_replicate(field, kern):
    """Brute-force 3x3 cross-correlation with edge replication."""
    h, w = field.shape
    out = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            acc = 0.0
            for i in range(3):
                for j in range(3):
                    yy = min(max(y + i - 1, 0), h - 1)
                    xx = min(max(x + j - 1, 0), w - 1)
                    acc += kern[i, j] * field[yy, xx]
            out[y, x] = acc
    return out


def laplacian_oracle(img):
    f = img.astype(float)
    dxx = conv3_replicate(conv3_replicate(f, SOBEL_X), SOBEL_X)
    dyy = conv3_replicate(conv3_replicate(f, SOBEL_Y), SOBEL_Y)
    return dxx + dyy


class TestLaplacian:
    def test_constant_image_is_zero(self):
        img = np.full((16, 16), 128, np.uint8)
        assert (laplacian(img) == 0).all()

    def test_linear_ramp_zero_interior(self):
        xs = np.tile(np.arange(32, dtype=np.uint8), (16, 1))
        lap = laplacian(xs)
        assert (lap[2:-2, 2:-2] == 0).all()

    def test_single_bright_pixel_matches_oracle(self):
        img = np.zeros((5, 5), np.uint8)
        img[2, 2] = 200
        np.testing.assert_array_equal(laplacian(img), laplacian_oracle(img))

    def test_random_images_match_oracle_exactly(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            img = rng.integers(0, 256, (16, 16), dtype=np.uint8)
            np.testing.assert_array_equal(laplacian(img), laplacian_oracle(img))

    def test_too_small_rejected(self):
        with pytest.raises(ImagingError):
            laplacian(np.zeros((2, 5), np.uint8))

    def test_linearity(self):
        rng = np.random.default_rng(2)
        a = rng.integers(0, 120, (12, 12)).astype(np.uint8)
        b = rng.integers(0, 120, (12, 12)).astype(np.uint8)
        lhs = laplacian((a.astype(np.uint16) + b).astype(np.uint8))
        rhs = laplacian(a) + laplacian(b)
        np.testing.assert_allclose(lhs, rhs, atol=1e-6)


class TestFocusMeasure:
    def test_constant_image_not_sharp(self):
        rep = focus_measure(np.full((32, 32), 100, np.uint8))
        assert rep.focus_measure == 0.0
        assert not rep.is_sharp
        assert rep.threshold == pytest.approx(0.2 * 100)

    def test_checkerboard_matches_variance_oracle(self):
        ys, xs = np.mgrid[0:32, 0:32]
        img = (((ys + xs) % 2) * 255).astype(np.uint8)
        rep = focus_measure(img, alpha=0.2)
        oracle = float(np.var(laplacian_oracle(img)))
        assert rep.focus_measure == pytest.approx(oracle)
        assert rep.is_sharp

    def test_blur_reduces_focus(self):
        ys, xs = np.mgrid[0:32, 0:32]
        img = (((ys + xs) % 2) * 255).astype(np.uint8)
        blurred = np.clip(ndimage.gaussian_filter(img.astype(float), 3.0), 0, 255).astype(np.uint8)
        assert focus_measure(blurred).focus_measure < focus_measure(img).focus_measure

    def test_gate_monotone_under_blur(self, node_patch):
        values = []
        for sigma in (0, 1, 2, 3, 5):
            img = node_patch if sigma == 0 else np.clip(
                ndimage.gaussian_filter(node_patch.astype(float), sigma), 0, 255
            ).astype(np.uint8)
            values.append(focus_measure(img).focus_measure)
        assert all(a > b for a, b in zip(values, values[1:]))


class TestMorphologicalOpen:
    def test_constant_unchanged(self):
        img = np.full((20, 20), 55, np.uint8)
        np.testing.assert_array_equal(morphological_open(img, 1, 3), img)

    def test_white_speck_removed(self):
        img = np.zeros((15, 15), np.uint8)
        img[7, 7] = 255
        assert (morphological_open(img, 1, 1) == 0).all()

    def test_idempotent_on_binary(self):
        rng = np.random.default_rng(5)
        img = (rng.random((40, 40)) > 0.6).astype(np.uint8) * 255
        once = morphological_open(img, 2, 3)
        twice = morphological_open(once, 2, 3)
        np.testing.assert_array_equal(once, twice)

    def test_darkens_rendered_code_patch(self, cam_clean):
        """A close render of a cell code, opened with radius = cell size,
        turns at least 90 percent of the code area dark (< 64)."""
        from nodeloc.floorid import GroundNode, NodeDatabase
        from nodeloc.geometry import project_point
        from nodeloc.gridpose import NodeGeometry
        from nodeloc.simulator import RenderSettings, Scene, render_frame
        from conftest import overhead_pose

        scene = Scene(
            nodes=NodeDatabase([GroundNode(0xAAAA, np.array([0.0, 0.0]), 0.0)]),
            geometry=NodeGeometry(pitch_m=0.12, code_size_m=0.05),
            blob_radius_m=0.04,
            marker_radius_m=0.04,
            node_disc_radius_m=0.24,
        )
        pose = overhead_pose(height=1.0)
        frame = render_frame(
            scene, pose, cam_clean,
            RenderSettings(motion_blur=0.0, noise_sigma=0.0),
        )
        # code at corner 1: node coords (pitch, -pitch)
        g = scene.geometry
        center = project_point(np.array([g.pitch_m, -g.pitch_m, 0.0]), pose, cam_clean)
        cell_px = g.code_size_m / 10.0 * 600.0  # 3 px at 1 m
        half = int(round(g.code_size_m / 2.0 * 600.0))
        margin = 8
        cx, cy = int(round(center[0])), int(round(center[1]))
        patch = frame[
            cy - half - margin : cy + half + margin, cx - half - margin : cx + half + margin
        ]
        opened = morphological_open(patch, int(np.ceil(cell_px)), 3)
        code_area = opened[margin:-margin, margin:-margin]
        assert (code_area < 64).mean() >= 0.90


class TestRescaleSigned:
    def test_black_maps_to_minus_half(self):
        out = rescale_signed(np.zeros((2, 2), np.uint8))
        assert (out == -0.5).all()

    def test_white_maps_to_plus_half(self):
        out = rescale_signed(np.full((2, 2), 255, np.uint8))
        assert (out == 0.5).all()

    def test_mid_gray(self):
        out = rescale_signed(np.full((1, 1), 128, np.uint8))
        assert out[0, 0] == pytest.approx(128 / 255 - 0.5)


class TestDoubleKernel:
    def test_structure(self):
        k = make_double_kernel(9)
        assert k.shape == (9, 9)
        assert k[4, 4] == -0.5
        assert set(np.unique(k)) <= {-0.5, 0.0, 0.5}
        assert np.abs(k).sum() > 0
        # corners lie at radius 4*sqrt(2) = 5.66 > 0.5*9: outside the annulus
        assert k[0, 0] == 0.0

    def test_accepts_paper_range_size(self):
        k = make_double_kernel(61)
        assert k.shape == (61, 61)

    def test_matched_target_peaks_at_center(self):
        k = make_double_kernel(15)
        # field agrees with the kernel signs: dark (-0.5) under the inner
        # disc, white (+0.5) under the annulus
        target = np.sign(k) * 0.5
        field = np.full((61, 61), 0.5)
        field[23:38, 23:38] = np.where(k != 0, target, 0.5)
        resp = correlate(field, k)
        peak = np.unravel_index(np.argmax(resp), resp.shape)
        assert peak == (30, 30)

    def test_too_small_or_even_rejected(self):
        with pytest.raises(ImagingError):
            make_double_kernel(7)
        with pytest.raises(ImagingError):
            make_double_kernel(10)


def correlate_oracle(field, kern):
    h, w = field.shape
    kh, kw = kern.shape
    out = np.full((h, w), -np.inf)
    for y in range(h - kh + 1):
        for x in range(w - kw + 1):
            acc = 0.0
            for i in range(kh):
                for j in range(kw):
                    acc += kern[i, j] * field[y + i, x + j]
            out[y + kh // 2, x + kw // 2] = acc
    return out


class TestCorrelate:
    def test_zero_field(self):
        out = correlate(np.zeros((20, 20)), make_double_kernel(9))
        assert (out[4:-4, 4:-4] == 0).all()
        assert np.isneginf(out[0, 0])

    def test_identity_kernel(self):
        rng = np.random.default_rng(8)
        field = rng.normal(size=(10, 12))
        out = correlate(field, np.array([[1.0]]))
        np.testing.assert_allclose(out, field)

    def test_matches_nested_loop_oracle(self):
        rng = np.random.default_rng(9)
        for shape, ksize in (((17, 23), 5), ((64, 64), 9), ((33, 40), 7)):
            field = rng.normal(size=shape)
            kern = rng.normal(size=(ksize, ksize))
            np.testing.assert_allclose(
                correlate(field, kern), correlate_oracle(field, kern), atol=1e-9
            )

    def test_field_smaller_than_kernel(self):
        with pytest.raises(ImagingError):
            correlate(np.zeros((5, 5)), make_double_kernel(9))


class TestThresholdRelative:
    def test_definition(self):
        field = np.array([[10.0, 7.9], [8.0, 1.0]])
        mask = threshold_relative(field, 0.8)
        np.testing.assert_array_equal(mask, [[255, 0], [255, 0]])

    def test_all_negative_empty(self):
        assert (threshold_relative(-np.ones((4, 4)), 0.5) == 0).all()

    def test_scale_invariance(self):
        rng = np.random.default_rng(10)
        field = rng.normal(size=(20, 20))
        m1 = threshold_relative(field, 0.6)
        m2 = threshold_relative(field * 37.5, 0.6)
        np.testing.assert_array_equal(m1, m2)

    def test_blob_scene_component_count(self):
        """Nine ideal targets -> exactly nine mask components at 0.8."""
        k = make_double_kernel(9)
        target = np.where(k != 0, np.sign(k) * 0.5, 0.5)
        field = np.full((70, 70), 0.5)
        for r in range(3):
            for c in range(3):
                y, x = 12 + 20 * r, 12 + 20 * c
                field[y : y + 9, x : x + 9] = target
        mask = threshold_relative(correlate(field, k), 0.8)
        n = ndimage.label(mask > 0, structure=np.ones((3, 3), bool))[1]
        assert n == 9

    def test_bad_factor(self):
        with pytest.raises(ImagingError):
            threshold_relative(np.ones((3, 3)), 0.0)


class TestResizeHalf:
    def test_constant(self):
        out = resize_half(np.full((8, 10), 99, np.uint8))
        assert out.shape == (4, 5)
        assert (out == 99).all()

    def test_round_half_up(self):
        img = np.array([[0, 255], [255, 0]], np.uint8)
        out = resize_half(img)
        assert out.shape == (1, 1)
        assert out[0, 0] == 128  # (0+255+255+0)/4 = 127.5 -> 128

    def test_checkerboard_to_constant(self):
        ys, xs = np.mgrid[0:16, 0:16]
        img = (((ys + xs) % 2) * 255).astype(np.uint8)
        out = resize_half(img)
        # every 2x2 block holds two 0s and two 255s -> mean 127.5 -> 128
        assert (out == 128).all()

    def test_odd_dimensions_floor(self):
        out = resize_half(np.zeros((9, 7), np.uint8))
        assert out.shape == (4, 3)


class TestPgmIO:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(12)
        img = rng.integers(0, 256, (33, 47), dtype=np.uint8)
        path = tmp_path / "img.pgm"
        write_pgm(path, img)
        np.testing.assert_array_equal(read_pgm(path), img)

    def test_rejects_non_pgm(self, tmp_path):
        path = tmp_path / "bad.pgm"
        path.write_bytes(b"P6\n1 1\n255\n\x00")
        with pytest.raises(ImagingError):
            read_pgm(path)
