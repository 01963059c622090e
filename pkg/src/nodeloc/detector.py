"""Node detection: rotation-invariant binary features matched against a
reference node image, K-means clustering of the match positions, and
region-of-interest selection.

The feature is a segment-test corner (16-pixel Bresenham circle, contiguous
arc of 9, fixed intensity threshold) with an intensity-centroid orientation,
described by 256 pairwise comparisons of box-smoothed intensities on a fixed
pseudo-random pattern that is rotated to the keypoint orientation. The
comparison pattern is generated by a small in-module LCG with a fixed seed,
so descriptors are identical across platforms and runs.
"""

from dataclasses import dataclass, field

import numpy as np

from . import _kernels

FAST_THRESHOLD = 20
FAST_ARC_MIN = 9
ORIENTATION_RADIUS = 7
PATCH_MARGIN = 15  # descriptor support: |offset| <= 13 rotated, +2 smoothing
DESCRIPTOR_BITS = 256
MATCH_MAX_DISTANCE = 64
MATCH_RATIO = 0.8
KMEANS_MAX_ITER = 50


class DetectorError(ValueError):
    pass


@dataclass(frozen=True)
class Keypoint:
    x_px: float
    y_px: float
    orientation_rad: float
    score: float


@dataclass(frozen=True)
class Match:
    ref_index: int
    keypoint: Keypoint
    distance: int


@dataclass(frozen=True)
class MatchSet:
    matches: tuple

    def points(self) -> np.ndarray:
        return np.array([[m.keypoint.x_px, m.keypoint.y_px] for m in self.matches])

    def __len__(self):
        return len(self.matches)


@dataclass(frozen=True)
class Cluster:
    center_px: np.ndarray
    count: int


@dataclass(frozen=True)
class Roi:
    center_px: np.ndarray
    half_extent_px: int
    feature_count: int
    crop: np.ndarray
    origin_xy: tuple  # top-left corner of the crop in frame coordinates


# ---------------------------------------------------------------------------
# descriptor comparison pattern (fixed, reproducible)


def _lcg_stream(seed):
    state = seed & 0xFFFFFFFFFFFFFFFF
    while True:
        state = (state * 6364136223846793005 + 1442695040888963407) & 0xFFFFFFFFFFFFFFFF
        yield state >> 33


def _make_pattern(n_bits=DESCRIPTOR_BITS, radius=13, seed=0x9E3779B97F4A7C15):
    """Pairs of sample offsets inside a disc, so any rotation keeps them
    within the 31x31 patch."""
    stream = _lcg_stream(seed)

    def draw_point():
        while True:
            x = int(next(stream) % (2 * radius + 1)) - radius
            y = int(next(stream) % (2 * radius + 1)) - radius
            if x * x + y * y <= radius * radius:
                return x, y

    ax, ay, bx, by = [], [], [], []
    for _ in range(n_bits):
        p = draw_point()
        q = draw_point()
        while q == p:
            q = draw_point()
        ax.append(p[0])
        ay.append(p[1])
        bx.append(q[0])
        by.append(q[1])
    return (
        np.array(ax, np.int64),
        np.array(ay, np.int64),
        np.array(bx, np.int64),
        np.array(by, np.int64),
    )


_PATTERN = _make_pattern()

_POPCOUNT = np.array([bin(i).count("1") for i in range(256)], np.uint8)


# ---------------------------------------------------------------------------
# detection


def _check_image(img):
    img = np.asarray(img)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise DetectorError("expected a 2-D uint8 image")
    return img


def detect_keypoints(img: np.ndarray, max_count: int = 500) -> list:
    """Segment-test corners with non-maximal suppression, strongest first.

    Only keypoints whose full descriptor patch lies inside the image are
    returned (margin 15 px), so every returned keypoint can be described.
    """
    img = _check_image(img)
    h, w = img.shape
    if h < 32 or w < 32:
        raise DetectorError("image must be at least 32x32")
    cdx, cdy = _kernels.circle_offsets()
    scores = _kernels.segment_scores(
        img, np.int64(FAST_THRESHOLD), np.int64(PATCH_MARGIN + 1), cdx, cdy
    )
    keep = _nonmax_suppress(scores)
    ys, xs = np.nonzero(keep)
    if ys.size == 0:
        return []
    vals = scores[ys, xs]
    order = np.lexsort((xs, ys, -vals))[: int(max_count)]
    ys, xs, vals = ys[order], xs[order], vals[order]
    angles = _orientations(img, xs, ys)
    sub_x, sub_y = _refine_subpixel(scores, xs, ys)
    return [
        Keypoint(float(x), float(y), float(a), float(s))
        for x, y, a, s in zip(sub_x, sub_y, angles, vals)
    ]


def _refine_subpixel(scores, xs, ys):
    """Parabolic interpolation of the score peak, clamped to half a pixel;
    keeps descriptors anchored on the physical corner between lattice
    positions."""
    out_x = xs.astype(np.float64).copy()
    out_y = ys.astype(np.float64).copy()
    for i, (x, y) in enumerate(zip(xs, ys)):
        c = scores[y, x]
        denom_x = scores[y, x - 1] - 2.0 * c + scores[y, x + 1]
        if denom_x < 0:
            dx = 0.5 * (scores[y, x - 1] - scores[y, x + 1]) / denom_x
            out_x[i] += float(np.clip(dx, -0.5, 0.5))
        denom_y = scores[y - 1, x] - 2.0 * c + scores[y + 1, x]
        if denom_y < 0:
            dy = 0.5 * (scores[y - 1, x] - scores[y + 1, x]) / denom_y
            out_y[i] += float(np.clip(dy, -0.5, 0.5))
    return out_x, out_y


def _nonmax_suppress(scores: np.ndarray) -> np.ndarray:
    """3x3 non-max suppression; score plateaus keep their raster-first pixel."""
    h, w = scores.shape
    pad = np.full((h + 2, w + 2), -1.0)
    pad[1:-1, 1:-1] = scores
    c = pad[1:-1, 1:-1]
    earlier = (
        (c > pad[:-2, :-2]) & (c > pad[:-2, 1:-1]) & (c > pad[:-2, 2:]) & (c > pad[1:-1, :-2])
    )
    later = (
        (c >= pad[1:-1, 2:]) & (c >= pad[2:, :-2]) & (c >= pad[2:, 1:-1]) & (c >= pad[2:, 2:])
    )
    return (c > 0) & earlier & later


def _orientations(img: np.ndarray, xs, ys) -> np.ndarray:
    """Dominant direction from the intensity centroid of a 15 px disc."""
    r = ORIENTATION_RADIUS
    dy, dx = np.mgrid[-r : r + 1, -r : r + 1]
    disc = (dy * dy + dx * dx) <= r * r
    dyf = dy[disc].astype(np.float64)
    dxf = dx[disc].astype(np.float64)
    angles = np.empty(len(xs))
    f = img.astype(np.float64)
    for i, (x, y) in enumerate(zip(xs, ys)):
        patch = f[y - r : y + r + 1, x - r : x + r + 1][disc]
        m10 = float(np.dot(dxf, patch))
        m01 = float(np.dot(dyf, patch))
        angles[i] = np.arctan2(m01, m10) % (2.0 * np.pi)
    return angles


# ---------------------------------------------------------------------------
# description


def _rotated_pattern(angle: float):
    c, s = np.cos(angle), np.sin(angle)
    ax, ay, bx, by = _PATTERN
    rax = ax * c - ay * s
    ray = ax * s + ay * c
    rbx = bx * c - by * s
    rby = bx * s + by * c
    return rax, ray, rbx, rby


def describe_all(img: np.ndarray, keypoints: list) -> np.ndarray:
    """Descriptors for all keypoints, one 32-byte row per keypoint.

    The image is smoothed with a 5x5 box filter (integral sums), each of
    the 256 comparison pairs is rotated to the keypoint orientation and
    the smoothed sums are sampled bilinearly at the rotated offsets.
    """
    img = _check_image(img)
    h, w = img.shape
    n = len(keypoints)
    if n == 0:
        return np.zeros((0, 32), np.uint8)
    kx = np.array([kp.x_px for kp in keypoints], np.float64)
    ky = np.array([kp.y_px for kp in keypoints], np.float64)
    if (
        (kx < PATCH_MARGIN).any()
        or (ky < PATCH_MARGIN).any()
        or (kx > w - 1 - PATCH_MARGIN).any()
        or (ky > h - 1 - PATCH_MARGIN).any()
    ):
        raise DetectorError("keypoint patch extends outside the image")
    smoothed = _kernels.box_sum5(img)
    pat_a_x = np.empty((n, DESCRIPTOR_BITS))
    pat_a_y = np.empty((n, DESCRIPTOR_BITS))
    pat_b_x = np.empty((n, DESCRIPTOR_BITS))
    pat_b_y = np.empty((n, DESCRIPTOR_BITS))
    for i, kp in enumerate(keypoints):
        rax, ray, rbx, rby = _rotated_pattern(kp.orientation_rad)
        pat_a_x[i], pat_a_y[i] = rax, ray
        pat_b_x[i], pat_b_y[i] = rbx, rby
    return _kernels.brief_bits(smoothed, kx, ky, pat_a_x, pat_a_y, pat_b_x, pat_b_y)


def describe(img: np.ndarray, kp: Keypoint) -> np.ndarray:
    """Descriptor of a single keypoint (32 bytes / 256 bits)."""
    return describe_all(img, [kp])[0]


def hamming_distances(desc: np.ndarray, refs: np.ndarray) -> np.ndarray:
    """Hamming distances between one descriptor and a (N, 32) reference set."""
    return _POPCOUNT[np.bitwise_xor(refs, desc[None, :])].sum(axis=1).astype(np.int64)


# ---------------------------------------------------------------------------
# matching


def match_reference(ref_descriptors: np.ndarray, live) -> MatchSet:
    """Nearest-reference matching with an absolute gate (<= 64 bits) and a
    0.8 ratio test against the second-nearest reference.

    ``live`` is a sequence of (Keypoint, descriptor) pairs; each live
    keypoint appears at most once in the result.
    """
    refs = np.asarray(ref_descriptors, np.uint8).reshape(-1, 32)
    matches = []
    if refs.shape[0] == 0:
        return MatchSet(())
    for kp, desc in live:
        d = hamming_distances(np.asarray(desc, np.uint8), refs)
        best = int(np.argmin(d))
        d1 = int(d[best])
        if refs.shape[0] > 1:
            d2 = int(np.partition(d, 1)[1])
        else:
            d2 = DESCRIPTOR_BITS + 1
        if d1 <= MATCH_MAX_DISTANCE and d1 <= MATCH_RATIO * d2:
            matches.append(Match(best, kp, d1))
    return MatchSet(tuple(matches))


# ---------------------------------------------------------------------------
# clustering


def cluster_matches(points, k_max: int = 3, merge_dist_px: float = 150.0) -> list:
    """Lloyd's K-means (deterministic farthest-point seeding) followed by
    greedy merging of centers closer than ``merge_dist_px``."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    n = pts.shape[0]
    if n == 0:
        raise DetectorError("cluster_matches needs at least one point")
    k = min(int(k_max), n)

    centroid = pts.mean(axis=0)
    seeds = [int(np.argmin(((pts - centroid) ** 2).sum(axis=1)))]
    while len(seeds) < k:
        d = np.min(
            ((pts[:, None, :] - pts[seeds][None, :, :]) ** 2).sum(axis=2), axis=1
        )
        seeds.append(int(np.argmax(d)))
    centers = pts[seeds].copy()

    assign = np.full(n, -1)
    for _ in range(KMEANS_MAX_ITER):
        d = ((pts[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_assign = np.argmin(d, axis=1)
        live = np.unique(new_assign)
        centers = np.array([pts[new_assign == c].mean(axis=0) for c in live])
        remap = {int(c): i for i, c in enumerate(live)}
        new_assign = np.array([remap[int(a)] for a in new_assign])
        if new_assign.shape == assign.shape and np.array_equal(new_assign, assign):
            break
        assign = new_assign

    members = [pts[assign == i] for i in range(centers.shape[0])]
    # greedy merge of close centers, recomputing from member points
    while len(members) > 1:
        best = None
        for i in range(len(members)):
            for j in range(i + 1, len(members)):
                ci = members[i].mean(axis=0)
                cj = members[j].mean(axis=0)
                dist = float(np.hypot(*(ci - cj)))
                if dist < merge_dist_px and (best is None or dist < best[0]):
                    best = (dist, i, j)
        if best is None:
            break
        _, i, j = best
        merged = np.vstack([members[i], members[j]])
        members = [m for idx, m in enumerate(members) if idx not in (i, j)]
        members.append(merged)
    return [Cluster(m.mean(axis=0), m.shape[0]) for m in members]


def select_roi(img: np.ndarray, clusters, min_features: int, half_extent_px: int):
    """Crop around the best-supported cluster, or None when no cluster has
    enough features. Ties break toward the smaller center y, then x."""
    img = _check_image(img)
    if not clusters:
        return None
    best = min(
        clusters,
        key=lambda c: (-c.count, float(c.center_px[1]), float(c.center_px[0])),
    )
    if best.count < int(min_features):
        return None
    h, w = img.shape
    he = int(half_extent_px)
    cx = int(round(float(best.center_px[0])))
    cy = int(round(float(best.center_px[1])))
    x0 = max(0, cx - he)
    y0 = max(0, cy - he)
    x1 = min(w, cx + he + 1)
    y1 = min(h, cy + he + 1)
    return Roi(
        center_px=np.array([float(best.center_px[0]), float(best.center_px[1])]),
        half_extent_px=he,
        feature_count=int(best.count),
        crop=img[y0:y1, x0:x1].copy(),
        origin_xy=(x0, y0),
    )


# ---------------------------------------------------------------------------
# convenience for the pipeline


def extract_features(img: np.ndarray, max_count: int = 500):
    """Keypoints plus descriptors in one call."""
    kps = detect_keypoints(img, max_count)
    descs = describe_all(img, kps)
    return kps, descs
