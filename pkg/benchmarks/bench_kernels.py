#!/usr/bin/env python3
"""Benchmark the numba kernels against the pure-numpy fallbacks.

The backend is fixed at import time, so this script runs the public
(possibly jitted) kernels next to the numpy implementations directly and
also times one full frame render per backend path. Typical output shows
the numba paths 5-100x faster on the loop-heavy kernels; the env flag
NODELOC_NUMBA=0 makes the package use the numpy column everywhere.

Usage: python benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import time

import numpy as np

from nodeloc import _kernels
from nodeloc._accel import backend_name
from nodeloc.imaging import disc_offsets


def timeit(fn, args, repeat):
    fn(*args)  # warm-up (includes jit compilation)
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    rng = np.random.default_rng(0)

    field = rng.normal(size=(160, 160))
    kern = rng.normal(size=(17, 17))
    img = rng.integers(0, 256, (480, 640), dtype=np.uint8)
    half = rng.integers(0, 256, (160, 160), dtype=np.uint8)
    dy, dx = disc_offsets(3)
    smoothed = _kernels._box_sum5_numpy(img)
    n_kp = 300
    kx = rng.uniform(20, 600, n_kp)
    ky = rng.uniform(20, 440, n_kp)
    pat = [rng.uniform(-13, 13, (n_kp, 256)) for _ in range(4)]
    xs = rng.uniform(0, 639, (480, 640))
    ys = rng.uniform(0, 479, (480, 640))
    cdx, cdy = _kernels.circle_offsets()

    cases = [
        ("correlate 160^2 x 17^2", _kernels.correlate_valid,
         _kernels._correlate_valid_numpy, (field, kern)),
        ("erode disc r3 160^2", _kernels.erode_offsets,
         _kernels._erode_offsets_numpy, (half, dy, dx)),
        ("sobel pass 640x480", _kernels.sobel_pass,
         _kernels._sobel_pass_numpy, (img.astype(np.float64), True)),
        ("box sum5 640x480", _kernels.box_sum5, _kernels._box_sum5_numpy, (img,)),
        ("segment scores 640x480", _kernels.segment_scores,
         _kernels._segment_scores_numpy, (img, np.int64(20), np.int64(16), cdx, cdy)),
        ("descriptors 300 kp", _kernels.brief_bits,
         _kernels._brief_bits_numpy, (smoothed, kx, ky, *pat)),
        ("bilinear warp 640x480", _kernels.bilinear_sample,
         _kernels._bilinear_sample_numpy, (img, xs, ys)),
    ]

    print(f"active package backend: {backend_name()}")
    print(f"{'kernel':28s} {'active':>10s} {'numpy':>10s} {'speedup':>8s}")
    for name, active, fallback, case_args in cases:
        t_active = timeit(active, case_args, args.repeat)
        t_numpy = timeit(fallback, case_args, args.repeat)
        print(
            f"{name:28s} {t_active * 1000:8.2f}ms {t_numpy * 1000:8.2f}ms "
            f"{t_numpy / t_active:7.1f}x"
        )

    # one full frame render through both albedo accumulators
    from nodeloc.floorid import GroundNode, NodeDatabase
    from nodeloc.geometry import CameraIntrinsics, RigidTransform
    from nodeloc.simulator import (
        DOWNWARD,
        Scene,
        _albedo_accumulate,
        _albedo_accumulate_numpy,
        _ideal_grid,
        _pack_scene,
    )

    k = CameraIntrinsics(600.0, 600.0, 320.0, 240.0, (0, 0, 0), (0, 0), 640, 480)
    scene = Scene(nodes=NodeDatabase([GroundNode(0, np.array([0.0, 0.0]), 0.0)]))
    pose = RigidTransform(DOWNWARD, np.array([0.0, 0.0, 1.0]))
    packed = _pack_scene(scene)
    ix, iy = _ideal_grid(k)
    render_args = (
        ix, iy, 0.0, 0.0, k.fx_px, k.fy_px, k.cx_px, k.cy_px,
        np.ascontiguousarray(pose.rotation), np.ascontiguousarray(pose.translation),
        0.0, *packed,
    )
    t_active = timeit(lambda *a: _albedo_accumulate(np.zeros((480, 640)), *a),
                      render_args, args.repeat)
    t_numpy = timeit(lambda *a: _albedo_accumulate_numpy(np.zeros((480, 640)), *a),
                     render_args, args.repeat)
    print(
        f"{'render pass 640x480':28s} {t_active * 1000:8.2f}ms {t_numpy * 1000:8.2f}ms "
        f"{t_numpy / t_active:7.1f}x"
    )


if __name__ == "__main__":
    main()
