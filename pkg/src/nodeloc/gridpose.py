"""Pose from the node's 3x3 blob grid: connected-component grid extraction
on the thresholded correlation mask, orientation disambiguation via corner
patch statistics, planar PnP (normalized DLT homography + Levenberg-
Marquardt on pixel reprojection error), four rotation-hypothesis candidates
and prior-based candidate filtering.

Grid conventions: blob centers are kept in canonical row-major order,
index = 3*(row+1) + (col+1) with row/col in {-1, 0, 1}. The column/row
axes are chosen with cross(col_axis, row_axis) > 0 in pixel coordinates,
which is the handedness a downward camera always sees for floor artwork;
the remaining 4-fold rotation ambiguity is the quadrant. Hypothesis q
assigns observed grid position (row, col) the node-frame point
rot(-q*90deg) @ (col*pitch, -row*pitch).
"""

from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .geometry import CameraIntrinsics, RigidTransform

GRID_RESIDUAL_LIMIT = 0.15  # fraction of mean spacing
AREA_BAND = (0.25, 4.0)  # accepted component area around the median
STDDEV_DOMINANCE = 0.6  # marker corner must be this fraction below runner-up
LM_MAX_ITER = 100
LM_STEP_TOL = 1e-10
LM_JACOBIAN_STEP = 1e-6
LM_FAIL_LIMIT = 5
RESIDUAL_QUANTUM_PX = 1e-6  # candidate ordering ignores sub-noise differences

# observed corner index (canonical grid order) where the orientation marker
# sits under each quadrant hypothesis
MARKER_OBS_INDEX_BY_QUADRANT = (6, 8, 2, 0)
CORNER_GRID_INDICES = (0, 2, 6, 8)

# angles (in 45-degree units) of observed corner positions and node corners,
# used to map a decoded corner code to the quadrant hypothesis
_OBS_ANG45 = {0: 3, 2: 1, 6: 5, 8: 7}
_NODE_CORNER_ANG45 = {0: 5, 1: 7, 2: 1, 3: 3}


class GridPoseError(ValueError):
    pass


class GridDetectError(GridPoseError):
    pass


class DegenerateConfigError(GridPoseError):
    pass


@dataclass(frozen=True)
class NodeGeometry:
    """Physical layout of a ground node: blob pitch, identity-code size and
    which corner carries the solid orientation-marker disc."""

    pitch_m: float = 0.05
    code_size_m: float = 0.015
    orientation_marker_corner: int = 0

    def __post_init__(self):
        if not self.pitch_m > self.code_size_m:
            raise GridPoseError("pitch must exceed the code size")
        if self.orientation_marker_corner not in (0, 1, 2, 3):
            raise GridPoseError("marker corner must be in {0..3}")


@dataclass(frozen=True)
class BlobGrid:
    """Nine blob centers in canonical row-major order (quadrant unknown)."""

    centers_px: np.ndarray  # (9, 2)
    mean_spacing_px: float
    residual_px: float
    col_axis_px: np.ndarray  # fitted x-direction of increasing column
    row_axis_px: np.ndarray  # fitted direction of increasing row

    def scaled(self, scale: float, offset: float = 0.0) -> "BlobGrid":
        """Map centers through x -> scale*x + offset (e.g. half-res to
        full-res ROI coordinates with scale=2, offset=0.5)."""
        return BlobGrid(
            centers_px=self.centers_px * scale + offset,
            mean_spacing_px=self.mean_spacing_px * scale,
            residual_px=self.residual_px * scale,
            col_axis_px=self.col_axis_px * scale,
            row_axis_px=self.row_axis_px * scale,
        )

    def translated(self, dx: float, dy: float) -> "BlobGrid":
        return replace(
            self, centers_px=self.centers_px + np.array([dx, dy])
        )

    @property
    def center_blob_px(self) -> np.ndarray:
        return self.centers_px[4]


@dataclass(frozen=True)
class PoseCandidate:
    quadrant: int
    pose: RigidTransform  # camera pose in the hypothesis' node frame
    reprojection_residual_px: float
    degraded: bool
    ok: bool


@dataclass(frozen=True)
class PoseCandidateSet:
    candidates: tuple  # 4 PoseCandidate, indexed by quadrant
    confidence_order: tuple
    orientation_source: str  # decoded-code | corner-stddev | unresolved

    def best(self) -> PoseCandidate:
        return self.candidates[self.confidence_order[0]]


@dataclass(frozen=True)
class OdometryPrior:
    timestamp_s: float
    pose: RigidTransform  # camera-to-world
    age_limit_s: float


# ---------------------------------------------------------------------------
# blob grid detection


def detect_blob_grid(mask: np.ndarray) -> BlobGrid:
    """Fit a 3x3 grid to the connected components of a binary mask.

    Components with area outside 0.25..4 times the median are dropped; the
    nine best remaining centroids are assigned row/column indices along the
    fitted axes and refined by an affine least-squares fit. Fails when
    fewer than nine blobs survive, the assignment is not a full 3x3 grid,
    the fit residual exceeds 0.15x spacing, or two centers nearly coincide.
    """
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise GridDetectError("mask must be 2-D")
    labels, count = ndimage.label(mask > 0, structure=np.ones((3, 3), dtype=bool))
    if count < 9:
        raise GridDetectError(f"insufficient blobs: {count} < 9")
    flat = labels.ravel()
    areas = np.bincount(flat)[1:].astype(np.float64)
    ys, xs = np.mgrid[0 : mask.shape[0], 0 : mask.shape[1]]
    sum_y = np.bincount(flat, weights=ys.ravel())[1:]
    sum_x = np.bincount(flat, weights=xs.ravel())[1:]
    cx = sum_x / areas
    cy = sum_y / areas

    median_area = float(np.median(areas))
    ok = (areas >= AREA_BAND[0] * median_area) & (areas <= AREA_BAND[1] * median_area)
    if int(ok.sum()) < 9:
        raise GridDetectError(f"insufficient blobs after area filter: {int(ok.sum())}")
    idx = np.nonzero(ok)[0]
    if idx.size > 9:
        dev = np.abs(np.log(areas[idx] / median_area))
        idx = idx[np.lexsort((idx, dev))][:9]
    pts = np.stack([cx[idx], cy[idx]], axis=1)

    center_i = int(np.argmin(((pts - pts.mean(axis=0)) ** 2).sum(axis=1)))
    center = pts[center_i]
    rel = np.delete(pts, center_i, axis=0) - center
    order = np.argsort(np.hypot(rel[:, 0], rel[:, 1]))
    edges = rel[order[:4]]
    v1 = edges[0]
    v1n = v1 / np.linalg.norm(v1)
    best_j, best_cross = 1, -1.0
    for j in range(1, 4):
        c = edges[j] / np.linalg.norm(edges[j])
        cr = abs(v1n[0] * c[1] - v1n[1] * c[0])
        if cr > best_cross:
            best_cross, best_j = cr, j
    v2 = edges[best_j]
    if best_cross < 0.5:
        raise GridDetectError("no orthogonal grid axes found")
    if v1[0] * v2[1] - v1[1] * v2[0] < 0:
        v2 = -v2

    basis = np.array([[v1[0], v2[0]], [v1[1], v2[1]]])
    try:
        coeffs = np.linalg.solve(basis, (pts - center).T).T
    except np.linalg.LinAlgError as exc:
        raise GridDetectError("degenerate grid axes") from exc
    grid_idx = np.round(coeffs).astype(int)
    if np.max(np.abs(coeffs - grid_idx)) > 0.35 or np.max(np.abs(grid_idx)) > 1:
        raise GridDetectError("centroids do not form a 3x3 grid")
    seen = {(int(c), int(r)) for c, r in grid_idx}
    if len(seen) != 9:
        raise GridDetectError("grid assignment is not one-to-one")

    # affine refit over (col, row) indices
    design = np.column_stack(
        [grid_idx[:, 0], grid_idx[:, 1], np.ones(9)]
    ).astype(np.float64)
    sol, *_ = np.linalg.lstsq(design, pts, rcond=None)
    col_axis = sol[0]
    row_axis = sol[1]
    fit = design @ sol
    residual = float(np.sqrt(np.mean(np.sum((pts - fit) ** 2, axis=1))))
    spacing = float((np.linalg.norm(col_axis) + np.linalg.norm(row_axis)) / 2.0)
    if residual > GRID_RESIDUAL_LIMIT * spacing:
        raise GridDetectError(
            f"grid fit residual {residual:.2f}px exceeds {GRID_RESIDUAL_LIMIT} of spacing"
        )

    centers = np.zeros((9, 2))
    for p, (c, r) in zip(pts, grid_idx):
        centers[3 * (r + 1) + (c + 1)] = p
    dists = np.sqrt(((centers[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2))
    np.fill_diagonal(dists, np.inf)
    if float(dists.min()) < 0.5 * spacing:
        raise GridDetectError("blob centers closer than half the grid spacing")
    return BlobGrid(
        centers_px=centers,
        mean_spacing_px=spacing,
        residual_px=residual,
        col_axis_px=col_axis,
        row_axis_px=row_axis,
    )


# ---------------------------------------------------------------------------
# orientation from corner patch statistics


def projected_code_size_px(grid: BlobGrid, geometry: NodeGeometry) -> float:
    return geometry.code_size_m / geometry.pitch_m * grid.mean_spacing_px


def corner_patch_stddevs(roi: np.ndarray, grid: BlobGrid, geometry: NodeGeometry):
    """Intensity standard deviation of an axis-aligned square patch
    (side 1.2x the projected code size) around each corner blob center,
    sampled from the original (pre-opening) ROI."""
    side = 1.2 * projected_code_size_px(grid, geometry)
    half = max(1, int(round(side / 2.0)))
    h, w = roi.shape
    out = {}
    for idx in CORNER_GRID_INDICES:
        x, y = grid.centers_px[idx]
        x0 = max(0, int(round(x)) - half)
        y0 = max(0, int(round(y)) - half)
        x1 = min(w, int(round(x)) + half + 1)
        y1 = min(h, int(round(y)) + half + 1)
        patch = roi[y0:y1, x0:x1]
        out[idx] = float(np.std(patch.astype(np.float64))) if patch.size else 0.0
    return out


def resolve_orientation(roi: np.ndarray, grid: BlobGrid, geometry: NodeGeometry):
    """Quadrant of the solid-marker corner (lowest patch stddev), or None
    when no corner is clearly flattest."""
    stds = corner_patch_stddevs(roi, grid, geometry)
    ranked = sorted(stds.items(), key=lambda kv: (kv[1], kv[0]))
    lowest_idx, lowest = ranked[0]
    second = ranked[1][1]
    if second <= 0.0 or lowest >= STDDEV_DOMINANCE * second:
        return None
    return MARKER_OBS_INDEX_BY_QUADRANT.index(lowest_idx)


def quadrant_from_decoded_corner(observed_corner_index: int, node_corner: int) -> int:
    """Quadrant hypothesis implied by decoding the code of ``node_corner``
    at the given observed grid corner."""
    if observed_corner_index not in _OBS_ANG45:
        raise GridPoseError("observed corner index must be one of 0, 2, 6, 8")
    return ((_OBS_ANG45[observed_corner_index] - _NODE_CORNER_ANG45[node_corner]) // 2) % 4


# ---------------------------------------------------------------------------
# planar PnP


def _rodrigues(v: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(v))
    if theta < 1e-12:
        k = np.array(
            [[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]]
        )
        return np.eye(3) + k + 0.5 * (k @ k)
    axis = v / theta
    k = np.array(
        [[0.0, -axis[2], axis[1]], [axis[2], 0.0, -axis[0]], [-axis[1], axis[0], 0.0]]
    )
    return np.eye(3) + np.sin(theta) * k + (1.0 - np.cos(theta)) * (k @ k)


def _normalize_points(pts: np.ndarray):
    centroid = pts.mean(axis=0)
    rms = np.sqrt(np.mean(np.sum((pts - centroid) ** 2, axis=1)))
    scale = np.sqrt(2.0) / rms if rms > 0 else 1.0
    t = np.array(
        [[scale, 0.0, -scale * centroid[0]], [0.0, scale, -scale * centroid[1]], [0.0, 0.0, 1.0]]
    )
    normalized = (pts - centroid) * scale
    return normalized, t


def _dlt_homography(obj_xy: np.ndarray, img_xy: np.ndarray) -> np.ndarray:
    src, t_src = _normalize_points(obj_xy)
    dst, t_dst = _normalize_points(img_xy)
    rows = []
    for (x, y), (u, v) in zip(src, dst):
        rows.append([-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u])
        rows.append([0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v])
    _, _, vt = np.linalg.svd(np.array(rows))
    h = vt[-1].reshape(3, 3)
    h = np.linalg.inv(t_dst) @ h @ t_src
    return h / h[2, 2]


def _pose_from_homography(h: np.ndarray, obj: np.ndarray):
    lam = 1.0 / np.sqrt(np.linalg.norm(h[:, 0]) * np.linalg.norm(h[:, 1]))
    best = None
    for sign in (lam, -lam):
        r1 = sign * h[:, 0]
        r2 = sign * h[:, 1]
        r3 = np.cross(r1, r2)
        u, _, vt = np.linalg.svd(np.column_stack([r1, r2, r3]))
        rot = u @ np.diag([1.0, 1.0, np.linalg.det(u @ vt)]) @ vt
        t = sign * h[:, 2]
        depths = (obj @ rot.T + t)[:, 2]
        n_front = int((depths > 0).sum())
        if best is None or n_front > best[0]:
            best = (n_front, rot, t)
    return best[1], best[2]


def _reprojection(obj, rot, t, k: CameraIntrinsics, obs):
    pc = obj @ rot.T + t
    if np.any(pc[:, 2] <= 1e-9):
        return None, np.inf
    proj = np.column_stack(
        [
            k.fx_px * pc[:, 0] / pc[:, 2] + k.cx_px,
            k.fy_px * pc[:, 1] / pc[:, 2] + k.cy_px,
        ]
    )
    r = (proj - obs).ravel()
    return r, float(r @ r)


@dataclass(frozen=True)
class PnpResult:
    pose: RigidTransform  # camera pose in the object (node) frame
    residual_px: float
    degraded: bool


def solve_pnp(object_pts, image_pts, k: CameraIntrinsics) -> PnpResult:
    """Pose of the camera in the frame of coplanar (z = 0) object points.

    Initializes from a normalized-DLT homography decomposition (picking the
    orthonormalization sign that puts the points in front of the camera)
    and refines with Levenberg-Marquardt over pixel reprojection error with
    forward-difference Jacobians. The residual is the RMS pixel error.
    """
    obj = np.asarray(object_pts, dtype=np.float64).reshape(-1, 3)
    obs = np.asarray(image_pts, dtype=np.float64).reshape(-1, 2)
    n = obj.shape[0]
    if n < 4 or obs.shape[0] != n:
        raise DegenerateConfigError("need at least 4 matched coplanar points")
    if np.max(np.abs(obj[:, 2])) > 1e-9:
        raise DegenerateConfigError("object points must lie in the z = 0 plane")
    centered = obj[:, :2] - obj[:, :2].mean(axis=0)
    svals = np.linalg.svd(centered, compute_uv=False)
    if svals[1] <= 1e-6 * max(1.0, svals[0]):
        raise DegenerateConfigError("object points are collinear")

    img_norm = np.column_stack(
        [(obs[:, 0] - k.cx_px) / k.fx_px, (obs[:, 1] - k.cy_px) / k.fy_px]
    )
    h = _dlt_homography(obj[:, :2], img_norm)
    rot, t = _pose_from_homography(h, obj)

    r, cost = _reprojection(obj, rot, t, k, obs)
    if r is None:
        raise DegenerateConfigError("initial pose places points behind the camera")

    mu = 1e-3
    fails = 0
    degraded = False
    for _ in range(LM_MAX_ITER):
        m = r.size
        jac = np.empty((m, 6))
        for i in range(6):
            delta = np.zeros(6)
            delta[i] = LM_JACOBIAN_STEP
            rot_p = rot @ _rodrigues(delta[:3])
            t_p = t + delta[3:]
            r_p, _ = _reprojection(obj, rot_p, t_p, k, obs)
            if r_p is None:
                r_p = r
            jac[:, i] = (r_p - r) / LM_JACOBIAN_STEP
        g = jac.T @ r
        hess = jac.T @ jac
        try:
            step = np.linalg.solve(hess + mu * np.eye(6), -g)
        except np.linalg.LinAlgError:
            step = None
        accepted = False
        if step is not None:
            rot_new = rot @ _rodrigues(step[:3])
            t_new = t + step[3:]
            r_new, cost_new = _reprojection(obj, rot_new, t_new, k, obs)
            if r_new is not None and cost_new < cost:
                rot, t, r, cost = rot_new, t_new, r_new, cost_new
                mu = max(mu / 3.0, 1e-15)
                fails = 0
                accepted = True
                if np.linalg.norm(step) < LM_STEP_TOL:
                    break
        if not accepted:
            mu *= 10.0
            fails += 1
            if fails >= LM_FAIL_LIMIT:
                degraded = cost > 1.0  # converged plateaus are not degraded
                break

    residual = float(np.sqrt(cost / n))
    cam_from_obj = RigidTransform(rot, t).orthonormalized()
    return PnpResult(pose=cam_from_obj.inverse(), residual_px=residual, degraded=degraded)


# ---------------------------------------------------------------------------
# four-pose hypotheses


def object_point_for_hypothesis(row: int, col: int, quadrant: int, pitch_m: float):
    """Node-frame coordinates assigned to observed grid position (row, col)
    under the given quadrant hypothesis."""
    x, y = col * pitch_m, -row * pitch_m
    if quadrant == 0:
        return x, y
    if quadrant == 1:
        return y, -x
    if quadrant == 2:
        return -x, -y
    return -y, x


def four_pose_candidates(
    grid: BlobGrid,
    orientation,
    geometry: NodeGeometry,
    k: CameraIntrinsics,
    orientation_source: str = "unresolved",
) -> PoseCandidateSet:
    """Solve PnP once per 90-degree node-rotation hypothesis, excluding the
    orientation-marker corner blob (8 correspondences per hypothesis)."""
    if orientation is None:
        orientation_source = "unresolved"
    candidates = []
    for q in range(4):
        excluded = MARKER_OBS_INDEX_BY_QUADRANT[q]
        obj = []
        img = []
        for r in (-1, 0, 1):
            for c in (-1, 0, 1):
                idx = 3 * (r + 1) + (c + 1)
                if idx == excluded:
                    continue
                x, y = object_point_for_hypothesis(r, c, q, geometry.pitch_m)
                obj.append((x, y, 0.0))
                img.append(grid.centers_px[idx])
        try:
            res = solve_pnp(obj, img, k)
            candidates.append(
                PoseCandidate(q, res.pose, res.residual_px, res.degraded, True)
            )
        except GridPoseError:
            candidates.append(
                PoseCandidate(q, RigidTransform.identity(), float("inf"), True, False)
            )
    if not any(c.ok for c in candidates):
        raise GridPoseError("all four pose hypotheses failed")

    def sort_key(q):
        c = candidates[q]
        resolved_first = 0 if (orientation is not None and q == orientation) else 1
        quantized = (
            round(c.reprojection_residual_px / RESIDUAL_QUANTUM_PX)
            if np.isfinite(c.reprojection_residual_px)
            else float("inf")
        )
        return (resolved_first, not c.ok, quantized, q)

    order = tuple(sorted(range(4), key=sort_key))
    return PoseCandidateSet(
        candidates=tuple(candidates),
        confidence_order=order,
        orientation_source=orientation_source,
    )


def lift_to_world(candidate: PoseCandidate, node) -> RigidTransform:
    """World camera pose of a candidate through the node's surveyed pose."""
    from .geometry import rot_z

    node_pose = RigidTransform(
        rot_z(node.yaw_rad),
        np.array([node.world_xy_m[0], node.world_xy_m[1], node.floor_height_m]),
    )
    return node_pose.compose(candidate.pose)


def filter_with_prior(cands: PoseCandidateSet, node, prior, now_s: float):
    """Pick the world-frame candidate: nearest (planar) to a fresh odometry
    prior when one exists, the confidence leader otherwise.

    Returns (world pose, chosen quadrant, filtered flag).
    """
    from .geometry import yaw_of_rotation

    world = {}
    for c in cands.candidates:
        if c.ok:
            world[c.quadrant] = lift_to_world(c, node)
    if not world:
        raise GridPoseError("no successful candidate to filter")

    fresh = prior is not None and (now_s - prior.timestamp_s) <= prior.age_limit_s
    if not fresh:
        chosen = cands.confidence_order[0]
        return world[chosen], chosen, False

    px, py = prior.pose.translation[0], prior.pose.translation[1]
    prior_yaw = yaw_of_rotation(prior.pose.rotation)

    def key(q):
        t = world[q].translation
        dist = float(np.hypot(t[0] - px, t[1] - py))
        dyaw = abs(
            (yaw_of_rotation(world[q].rotation) - prior_yaw + np.pi) % (2.0 * np.pi)
            - np.pi
        )
        return (dist, dyaw, q)

    chosen = min(world.keys(), key=key)
    return world[chosen], chosen, True
