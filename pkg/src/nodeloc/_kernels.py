"""Hot numeric inner loops: dense correlation, grayscale morphology,
Sobel passes, box sums, segment-test corner scoring, binary descriptor
sampling and bilinear warping.

Each kernel has a numba ``@njit`` implementation and a vectorized numpy
fallback; ``nodeloc._accel.USE_NUMBA`` (env var NODELOC_NUMBA) selects
which one backs the public name. The two paths agree within 1e-9 (exactly,
for the integer-valued ones) and the test suite checks both against
brute-force oracles.
"""

import numpy as np

from ._accel import USE_NUMBA

if USE_NUMBA:
    from numba import njit


NEG_INF = float("-inf")


# ---------------------------------------------------------------------------
# dense valid-region cross-correlation


def _correlate_valid_loops(field, kernel):
    h, w = field.shape
    kh, kw = kernel.shape
    my, mx = kh // 2, kw // 2
    out = np.full((h, w), NEG_INF)
    for y in range(my, h - kh + my + 1):
        for x in range(mx, w - kw + mx + 1):
            acc = 0.0
            for i in range(kh):
                for j in range(kw):
                    acc += kernel[i, j] * field[y - my + i, x - mx + j]
            out[y, x] = acc
    return out


def _correlate_valid_numpy(field, kernel):
    h, w = field.shape
    kh, kw = kernel.shape
    my, mx = kh // 2, kw // 2
    out = np.full((h, w), NEG_INF)
    if h < kh or w < kw:
        return out
    windows = np.lib.stride_tricks.sliding_window_view(field, (kh, kw))
    out[my : my + h - kh + 1, mx : mx + w - kw + 1] = np.einsum(
        "ijkl,kl->ij", windows, kernel
    )
    return out


# ---------------------------------------------------------------------------
# grayscale erosion / dilation with an arbitrary offset set (disc)


def _erode_offsets_loops(img, dy, dx):
    h, w = img.shape
    n = dy.shape[0]
    out = np.empty((h, w), np.uint8)
    for y in range(h):
        for x in range(w):
            best = 255
            for k in range(n):
                yy = y + dy[k]
                xx = x + dx[k]
                if 0 <= yy < h and 0 <= xx < w:
                    v = img[yy, xx]
                    if v < best:
                        best = v
            out[y, x] = best
    return out


def _dilate_offsets_loops(img, dy, dx):
    h, w = img.shape
    n = dy.shape[0]
    out = np.empty((h, w), np.uint8)
    for y in range(h):
        for x in range(w):
            best = 0
            for k in range(n):
                yy = y + dy[k]
                xx = x + dx[k]
                if 0 <= yy < h and 0 <= xx < w:
                    v = img[yy, xx]
                    if v > best:
                        best = v
            out[y, x] = best
    return out


def _minmax_offsets_numpy(img, dy, dx, take_min):
    h, w = img.shape
    fill = 255 if take_min else 0
    out = np.full((h, w), fill, np.uint8)
    for k in range(dy.shape[0]):
        oy, ox = int(dy[k]), int(dx[k])
        ys0, ys1 = max(0, oy), min(h, h + oy)
        xs0, xs1 = max(0, ox), min(w, w + ox)
        yd0, yd1 = max(0, -oy), min(h, h - oy)
        xd0, xd1 = max(0, -ox), min(w, w - ox)
        src = img[ys0:ys1, xs0:xs1]
        dst = out[yd0:yd1, xd0:xd1]
        if take_min:
            np.minimum(dst, src, out=dst)
        else:
            np.maximum(dst, src, out=dst)
    return out


def _erode_offsets_numpy(img, dy, dx):
    return _minmax_offsets_numpy(img, dy, dx, True)


def _dilate_offsets_numpy(img, dy, dx):
    return _minmax_offsets_numpy(img, dy, dx, False)


# ---------------------------------------------------------------------------
# 3x3 Sobel passes with edge replication (float64 in, float64 out).
# The smoothing wing [1,2,1] is normalized to unit mass (kernel / 4), so the
# output scale is set by the central difference alone; values stay exact in
# float64 (quarter-integer sums).


def _sobel_pass_loops(field, horizontal):
    h, w = field.shape
    out = np.empty((h, w))
    for y in range(h):
        ym = y - 1 if y > 0 else 0
        yp = y + 1 if y < h - 1 else h - 1
        for x in range(w):
            xm = x - 1 if x > 0 else 0
            xp = x + 1 if x < w - 1 else w - 1
            if horizontal:
                out[y, x] = 0.25 * (
                    field[ym, xp]
                    + 2.0 * field[y, xp]
                    + field[yp, xp]
                    - field[ym, xm]
                    - 2.0 * field[y, xm]
                    - field[yp, xm]
                )
            else:
                out[y, x] = 0.25 * (
                    field[yp, xm]
                    + 2.0 * field[yp, x]
                    + field[yp, xp]
                    - field[ym, xm]
                    - 2.0 * field[ym, x]
                    - field[ym, xp]
                )
    return out


def _sobel_pass_numpy(field, horizontal):
    p = np.pad(field, 1, mode="edge")
    if horizontal:
        return 0.25 * (
            p[:-2, 2:]
            + 2.0 * p[1:-1, 2:]
            + p[2:, 2:]
            - p[:-2, :-2]
            - 2.0 * p[1:-1, :-2]
            - p[2:, :-2]
        )
    return 0.25 * (
        p[2:, :-2]
        + 2.0 * p[2:, 1:-1]
        + p[2:, 2:]
        - p[:-2, :-2]
        - 2.0 * p[:-2, 1:-1]
        - p[:-2, 2:]
    )


# ---------------------------------------------------------------------------
# 5x5 box sum with edge replication (uint8 in, int64 out)


def _box_sum5_loops(img):
    h, w = img.shape
    out = np.empty((h, w), np.int64)
    for y in range(h):
        for x in range(w):
            acc = 0
            for i in range(-2, 3):
                yy = y + i
                if yy < 0:
                    yy = 0
                elif yy >= h:
                    yy = h - 1
                for j in range(-2, 3):
                    xx = x + j
                    if xx < 0:
                        xx = 0
                    elif xx >= w:
                        xx = w - 1
                    acc += img[yy, xx]
            out[y, x] = acc
    return out


def _box_sum5_numpy(img):
    p = np.pad(img.astype(np.int64), 2, mode="edge")
    out = np.zeros(img.shape, np.int64)
    for i in range(5):
        for j in range(5):
            out += p[i : i + img.shape[0], j : j + img.shape[1]]
    return out


# ---------------------------------------------------------------------------
# segment-test corner scores (16-pixel Bresenham circle, arc >= 9)

_CIRCLE_DX = np.array(
    [0, 1, 2, 3, 3, 3, 2, 1, 0, -1, -2, -3, -3, -3, -2, -1], np.int64
)
_CIRCLE_DY = np.array(
    [-3, -3, -2, -1, 0, 1, 2, 3, 3, 3, 2, 1, 0, -1, -2, -3], np.int64
)


def _segment_scores_loops(img, thresh, margin, cdx, cdy):
    h, w = img.shape
    out = np.zeros((h, w))
    for y in range(margin, h - margin):
        for x in range(margin, w - margin):
            c = np.int64(img[y, x])
            nbright = 0
            ndark = 0
            for k in range(16):
                v = np.int64(img[y + cdy[k], x + cdx[k]])
                if v > c + thresh:
                    nbright += 1
                elif v < c - thresh:
                    ndark += 1
            if nbright < 9 and ndark < 9:
                continue
            # contiguous-arc check over the doubled ring
            run_b = 0
            run_d = 0
            best_b = 0
            best_d = 0
            for k in range(32):
                v = np.int64(img[y + cdy[k % 16], x + cdx[k % 16]])
                if v > c + thresh:
                    run_b += 1
                    if run_b > best_b:
                        best_b = run_b
                else:
                    run_b = 0
                if v < c - thresh:
                    run_d += 1
                    if run_d > best_d:
                        best_d = run_d
                else:
                    run_d = 0
            if best_b < 9 and best_d < 9:
                continue
            sb = 0.0
            sd = 0.0
            for k in range(16):
                v = np.int64(img[y + cdy[k], x + cdx[k]])
                if v > c + thresh:
                    sb += v - c - thresh
                elif v < c - thresh:
                    sd += c - v - thresh
            if best_b >= 9 and (best_d < 9 or sb >= sd):
                out[y, x] = sb
            else:
                out[y, x] = sd
    return out


def _segment_scores_numpy(img, thresh, margin, cdx, cdy):
    h, w = img.shape
    out = np.zeros((h, w))
    if h <= 2 * margin or w <= 2 * margin:
        return out
    core = img[margin : h - margin, margin : w - margin].astype(np.int64)
    ring = np.empty((16,) + core.shape, np.int64)
    for k in range(16):
        oy, ox = int(cdy[k]), int(cdx[k])
        ring[k] = img[
            margin + oy : h - margin + oy, margin + ox : w - margin + ox
        ].astype(np.int64)
    bright = ring > core + thresh
    dark = ring < core - thresh
    # longest circular run of True along axis 0, computed on the doubled ring
    def _arc_ok(mask):
        doubled = np.concatenate([mask, mask], axis=0)
        run = np.zeros(core.shape, np.int64)
        best = np.zeros(core.shape, np.int64)
        for k in range(32):
            run = np.where(doubled[k], run + 1, 0)
            best = np.maximum(best, run)
        return best >= 9

    ok_b = _arc_ok(bright)
    ok_d = _arc_ok(dark)
    sb = np.where(bright, ring - core - thresh, 0).sum(axis=0).astype(np.float64)
    sd = np.where(dark, core - ring - thresh, 0).sum(axis=0).astype(np.float64)
    score = np.zeros(core.shape)
    use_b = ok_b & (~ok_d | (sb >= sd))
    use_d = ok_d & ~use_b
    score[use_b] = sb[use_b]
    score[use_d] = sd[use_d]
    out[margin : h - margin, margin : w - margin] = score
    return out


# ---------------------------------------------------------------------------
# binary descriptor sampling on box-smoothed sums


def _brief_bits_loops(smoothed, kx, ky, pat_a_x, pat_a_y, pat_b_x, pat_b_y):
    # bilinear sampling of the box sums in the "base + fractional deltas"
    # form, so inverting the image negates every sample difference exactly
    n = kx.shape[0]
    out = np.zeros((n, 32), np.uint8)
    for i in range(n):
        x0 = float(kx[i])
        y0 = float(ky[i])
        for j in range(256):
            ax = x0 + pat_a_x[i, j]
            ay = y0 + pat_a_y[i, j]
            bx = x0 + pat_b_x[i, j]
            by = y0 + pat_b_y[i, j]
            axi = int(np.floor(ax))
            ayi = int(np.floor(ay))
            bxi = int(np.floor(bx))
            byi = int(np.floor(by))
            fax = ax - axi
            fay = ay - ayi
            fbx = bx - bxi
            fby = by - byi
            s00 = smoothed[ayi, axi]
            a = (
                s00
                + fax * (smoothed[ayi, axi + 1] - s00)
                + fay * (smoothed[ayi + 1, axi] - s00)
                + fax * fay * (
                    s00
                    + smoothed[ayi + 1, axi + 1]
                    - smoothed[ayi, axi + 1]
                    - smoothed[ayi + 1, axi]
                )
            )
            t00 = smoothed[byi, bxi]
            b = (
                t00
                + fbx * (smoothed[byi, bxi + 1] - t00)
                + fby * (smoothed[byi + 1, bxi] - t00)
                + fbx * fby * (
                    t00
                    + smoothed[byi + 1, bxi + 1]
                    - smoothed[byi, bxi + 1]
                    - smoothed[byi + 1, bxi]
                )
            )
            if a < b:
                out[i, j >> 3] |= np.uint8(128 >> (j & 7))
    return out


def _bilinear_group_numpy(smoothed, xs, ys):
    xi = np.floor(xs).astype(np.int64)
    yi = np.floor(ys).astype(np.int64)
    fx = xs - xi
    fy = ys - yi
    s00 = smoothed[yi, xi]
    return (
        s00
        + fx * (smoothed[yi, xi + 1] - s00)
        + fy * (smoothed[yi + 1, xi] - s00)
        + fx * fy * (s00 + smoothed[yi + 1, xi + 1] - smoothed[yi, xi + 1] - smoothed[yi + 1, xi])
    )


def _brief_bits_numpy(smoothed, kx, ky, pat_a_x, pat_a_y, pat_b_x, pat_b_y):
    smoothed = smoothed.astype(np.float64)
    a = _bilinear_group_numpy(smoothed, kx[:, None] + pat_a_x, ky[:, None] + pat_a_y)
    b = _bilinear_group_numpy(smoothed, kx[:, None] + pat_b_x, ky[:, None] + pat_b_y)
    bits = (a < b).astype(np.uint8)
    return np.packbits(bits, axis=1)


# ---------------------------------------------------------------------------
# bilinear sampling (uint8 image, float sample grids, 0 outside)


def _bilinear_sample_loops(img, xs, ys):
    h, w = img.shape
    oh, ow = xs.shape
    out = np.zeros((oh, ow), np.uint8)
    for y in range(oh):
        for x in range(ow):
            sx = xs[y, x]
            sy = ys[y, x]
            if sx < 0.0 or sy < 0.0 or sx > w - 1.0 or sy > h - 1.0:
                continue
            x0 = int(sx)
            y0 = int(sy)
            if x0 > w - 2:
                x0 = w - 2
            if y0 > h - 2:
                y0 = h - 2
            fx = sx - x0
            fy = sy - y0
            v = (
                img[y0, x0] * (1.0 - fx) * (1.0 - fy)
                + img[y0, x0 + 1] * fx * (1.0 - fy)
                + img[y0 + 1, x0] * (1.0 - fx) * fy
                + img[y0 + 1, x0 + 1] * fx * fy
            )
            out[y, x] = np.uint8(int(v + 0.5))
    return out


def _bilinear_sample_numpy(img, xs, ys):
    h, w = img.shape
    inside = (xs >= 0.0) & (ys >= 0.0) & (xs <= w - 1.0) & (ys <= h - 1.0)
    sx = np.where(inside, xs, 0.0)
    sy = np.where(inside, ys, 0.0)
    x0 = np.minimum(sx.astype(np.int64), w - 2)
    y0 = np.minimum(sy.astype(np.int64), h - 2)
    fx = sx - x0
    fy = sy - y0
    f = img.astype(np.float64)
    v = (
        f[y0, x0] * (1.0 - fx) * (1.0 - fy)
        + f[y0, x0 + 1] * fx * (1.0 - fy)
        + f[y0 + 1, x0] * (1.0 - fx) * fy
        + f[y0 + 1, x0 + 1] * fx * fy
    )
    out = (v + 0.5).astype(np.uint8)
    out[~inside] = 0
    return out


# ---------------------------------------------------------------------------
# backend selection

if USE_NUMBA:
    correlate_valid = njit(cache=True)(_correlate_valid_loops)
    erode_offsets = njit(cache=True)(_erode_offsets_loops)
    dilate_offsets = njit(cache=True)(_dilate_offsets_loops)
    sobel_pass = njit(cache=True)(_sobel_pass_loops)
    box_sum5 = njit(cache=True)(_box_sum5_loops)
    segment_scores = njit(cache=True)(_segment_scores_loops)
    brief_bits = njit(cache=True)(_brief_bits_loops)
    bilinear_sample = njit(cache=True)(_bilinear_sample_loops)
else:
    correlate_valid = _correlate_valid_numpy
    erode_offsets = _erode_offsets_numpy
    dilate_offsets = _dilate_offsets_numpy
    sobel_pass = _sobel_pass_numpy
    box_sum5 = _box_sum5_numpy
    segment_scores = _segment_scores_numpy
    brief_bits = _brief_bits_numpy
    bilinear_sample = _bilinear_sample_numpy


def circle_offsets():
    """The 16-pixel Bresenham circle used by the segment test."""
    return _CIRCLE_DX.copy(), _CIRCLE_DY.copy()
