"""Frame-by-frame localization: feature-based ROI detection, the blur
gate, the correlation chain, blob-grid pose candidates, identity from
decoding or floor back-projection, prior-based filtering, and run metrics.

A Pipeline instance owns the cross-frame state: the last absolute fix (it
re-anchors the drifting odometry prior) and a per-frame trace with exactly
one terminal record per processed frame.
"""

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .detector import cluster_matches, extract_features, match_reference, select_roi
from .floorid import NodeDatabase, identify_node, project_node_center
from .geometry import (
    CameraIntrinsics,
    FloorModel,
    RigidTransform,
    undistort_image,
    yaw_of_rotation,
)
from .gridpose import (
    GridPoseError,
    NodeGeometry,
    OdometryPrior,
    detect_blob_grid,
    filter_with_prior,
    four_pose_candidates,
    quadrant_from_decoded_corner,
    resolve_orientation,
    CORNER_GRID_INDICES,
)
from .imaging import (
    correlate,
    focus_measure,
    make_double_kernel,
    morphological_open,
    rescale_signed,
    resize_half,
    threshold_relative,
)
from .nodecode import DecodeError, decode_roi
from .simulator import interp_pose_track

SOURCE_DECODED = "decoded"
SOURCE_PROJECTED = "projected-id"


class PipelineError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    blur_alpha: float = 0.2
    kernel_size_px: int = 61
    threshold_factor: float = 0.8
    min_features: int = 10
    merge_dist_px: float = 150.0
    roi_half_extent_px: int = 160
    decode_budget_ms: float = 50.0
    prior_age_limit_s: float = 10.0
    max_ident_dist_m: float = 0.75
    opening_radius_px: int = 2
    opening_iterations: int = 3
    max_keypoints: int = 500
    decode_enabled: bool = True
    use_prior_filter: bool = True
    reanchor_prior: bool = True
    floor_height_m: float = 0.0

    def __post_init__(self):
        if self.kernel_size_px % 2 == 0:
            raise PipelineError("kernel size must be odd")
        for name in (
            "blur_alpha", "kernel_size_px", "threshold_factor", "min_features",
            "merge_dist_px", "roi_half_extent_px", "prior_age_limit_s",
            "max_ident_dist_m", "opening_radius_px", "opening_iterations",
            "max_keypoints",
        ):
            if getattr(self, name) <= 0:
                raise PipelineError(f"{name} must be positive")
        if self.decode_budget_ms < 0:
            raise PipelineError("decode budget must be non-negative")


@dataclass(frozen=True)
class LocalizationFix:
    timestamp_s: float
    pose: RigidTransform  # camera-to-world
    node_id: int
    source: str  # decoded | projected-id
    chosen_quadrant: int
    reprojection_residual_px: float
    filtered: bool


@dataclass(frozen=True)
class FrameTrace:
    timestamp_s: float
    stage: str
    status: str


@dataclass
class RunMetrics:
    errors_m: np.ndarray
    elapsed_s: np.ndarray
    fix_rate_hz: float
    disambiguation_rate: float
    n_fixes: int
    frame_time_ms: float = float("nan")


class Pipeline:
    """Stateful frame processor; one instance handles one run."""

    def __init__(
        self,
        config: PipelineConfig,
        intrinsics: CameraIntrinsics,
        node_db: NodeDatabase,
        node_geometry: NodeGeometry,
        reference_image: np.ndarray,
        anchor_time_s: float = None,
    ):
        self.config = config
        self.intrinsics = intrinsics
        self.node_db = node_db
        self.geometry = node_geometry
        self.floor = FloorModel(config.floor_height_m)
        self._kernel = make_double_kernel(config.kernel_size_px)
        _, ref_desc = extract_features(reference_image, config.max_keypoints)
        if ref_desc.shape[0] == 0:
            raise PipelineError("reference image produced no features")
        self._ref_descriptors = ref_desc
        self.reset(anchor_time_s)

    def reset(self, anchor_time_s: float = None):
        self.trace = []
        self.frame_times_ms = []
        self.debug_projections = []  # (t, floor_x, floor_y, node_id) per projected fix
        self.last_fix = None
        self._last_absolute_s = anchor_time_s
        self._prior_correction = None

    # -- helpers

    def _finish(self, t, stage, status, fix=None):
        self.trace.append(FrameTrace(t, stage, status))
        return fix

    def _effective_prior(self, raw_pose: RigidTransform) -> RigidTransform:
        if self.config.reanchor_prior and self._prior_correction is not None:
            return self._prior_correction.compose(raw_pose)
        return raw_pose

    def _corner_quads(self, grid_roi):
        """Candidate code quadrilaterals at the four corner blobs, aligned
        with the fitted grid axes, in ROI pixel coordinates."""
        ratio = self.geometry.code_size_m / self.geometry.pitch_m
        u = grid_roi.col_axis_px * ratio
        v = grid_roi.row_axis_px * ratio
        quads = []
        for idx in CORNER_GRID_INDICES:
            c = grid_roi.centers_px[idx]
            quads.append(
                np.array(
                    [
                        c - 0.5 * u - 0.5 * v,
                        c + 0.5 * u - 0.5 * v,
                        c + 0.5 * u + 0.5 * v,
                        c - 0.5 * u + 0.5 * v,
                    ]
                )
            )
        return quads, list(CORNER_GRID_INDICES)

    # -- main entry

    def process_frame(self, img: np.ndarray, timestamp_s: float, prior_pose=None):
        started = time.perf_counter()
        try:
            return self._process(img, timestamp_s, prior_pose)
        finally:
            self.frame_times_ms.append((time.perf_counter() - started) * 1000.0)

    def _process(self, img, t, prior_pose):
        cfg = self.config
        und = undistort_image(img, self.intrinsics)

        kps, descs = extract_features(und, cfg.max_keypoints)
        matches = match_reference(self._ref_descriptors, zip(kps, descs))
        if len(matches) == 0:
            return self._finish(t, "detect", "no-roi")
        clusters = cluster_matches(matches.points(), 3, cfg.merge_dist_px)
        roi = select_roi(und, clusters, cfg.min_features, cfg.roi_half_extent_px)
        if roi is None:
            return self._finish(t, "detect", "no-roi")

        report = focus_measure(roi.crop, cfg.blur_alpha)

        small = resize_half(roi.crop)
        opened = morphological_open(small, cfg.opening_radius_px, cfg.opening_iterations)
        signed = rescale_signed(opened)
        if (
            signed.shape[0] < self._kernel.shape[0]
            or signed.shape[1] < self._kernel.shape[1]
        ):
            return self._finish(t, "grid", "roi-smaller-than-kernel")
        response = correlate(signed, self._kernel)
        mask = threshold_relative(response, cfg.threshold_factor)
        try:
            grid_half = detect_blob_grid(mask)
        except GridPoseError:
            return self._finish(t, "grid", "no-grid")
        grid_roi = grid_half.scaled(2.0, 0.5)
        grid_frame = grid_roi.translated(roi.origin_xy[0], roi.origin_xy[1])

        decode_result = None
        observed_corner = None
        if cfg.decode_enabled and report.is_sharp and cfg.decode_budget_ms > 0:
            quads, corner_ids = self._corner_quads(grid_roi)
            try:
                decode_result = decode_roi(roi.crop, quads, cfg.decode_budget_ms)
                observed_corner = corner_ids[decode_result.quad_index]
            except DecodeError:
                decode_result = None

        orientation = None
        source = "unresolved"
        node = None
        fix_source = None
        if decode_result is not None:
            orientation = quadrant_from_decoded_corner(
                observed_corner, decode_result.payload.corner_index
            )
            source = "decoded-code"
            node = self.node_db.get(decode_result.payload.node_id)
            if node is not None:
                fix_source = SOURCE_DECODED
        if orientation is None:
            orientation = resolve_orientation(roi.crop, grid_roi, self.geometry)
            if orientation is not None:
                source = "corner-stddev"

        try:
            cands = four_pose_candidates(
                grid_frame, orientation, self.geometry, self.intrinsics, source
            )
        except GridPoseError:
            return self._finish(t, "pnp", "failed")

        eff_prior = None
        if prior_pose is not None:
            eff_prior = OdometryPrior(
                t, self._effective_prior(prior_pose), cfg.prior_age_limit_s
            )

        if node is None:
            if eff_prior is None:
                return self._finish(t, "ident", "none")
            prior_age = (
                t - self._last_absolute_s
                if self._last_absolute_s is not None
                else float("inf")
            )
            floor_pt = project_node_center(
                grid_frame.center_blob_px, eff_prior.pose, self.intrinsics, self.floor
            )
            node = identify_node(
                floor_pt,
                self.node_db,
                cfg.max_ident_dist_m,
                prior_age,
                cfg.prior_age_limit_s,
            )
            if node is None:
                return self._finish(t, "ident", "none")
            fix_source = SOURCE_PROJECTED
            self.debug_projections.append((t, float(floor_pt[0]), float(floor_pt[1]), node.id))

        # prior-based selection is the remedy for the unresolved 4-fold
        # ambiguity; a resolved marker/decode orientation is trusted as-is
        # (position separation between hypotheses vanishes when the camera
        # is right above the node, where the prior filter is blind)
        use_filter = (
            eff_prior is not None and cfg.use_prior_filter and orientation is None
        )
        filter_prior = eff_prior if use_filter else None
        world_pose, chosen_q, filtered = filter_with_prior(cands, node, filter_prior, t)

        fix = LocalizationFix(
            timestamp_s=t,
            pose=world_pose,
            node_id=node.id,
            source=fix_source,
            chosen_quadrant=chosen_q,
            reprojection_residual_px=cands.candidates[chosen_q].reprojection_residual_px,
            filtered=filtered,
        )
        self.last_fix = fix
        self._last_absolute_s = t
        if cfg.reanchor_prior and prior_pose is not None:
            self._prior_correction = world_pose.compose(prior_pose.inverse())
        return self._finish(t, "fix", "ok", fix)


# ---------------------------------------------------------------------------
# metrics


def _wrap_angle(a: float) -> float:
    return (a + np.pi) % (2.0 * np.pi) - np.pi


def compute_metrics(
    fixes,
    truth_times,
    truth_poses,
    frame_times_s=None,
    visible_flags=None,
    frame_timings_ms=None,
) -> RunMetrics:
    """Planar error per fix against interpolated truth, elapsed time since
    the previous fix, fix rate over node-visible frames, and the fraction
    of fixes whose pose picked the true rotation (world yaw within 45 deg).
    """
    truth_times = np.asarray(truth_times, dtype=np.float64)
    fixes = list(fixes)
    errors = np.zeros(len(fixes))
    elapsed = np.zeros(len(fixes))
    yaw_ok = np.zeros(len(fixes), dtype=bool)
    start = float(frame_times_s[0]) if frame_times_s is not None and len(frame_times_s) else (
        fixes[0].timestamp_s if fixes else 0.0
    )
    prev = start
    for i, fix in enumerate(fixes):
        truth = interp_pose_track(truth_times, truth_poses, fix.timestamp_s)
        dx = fix.pose.translation[0] - truth.translation[0]
        dy = fix.pose.translation[1] - truth.translation[1]
        errors[i] = np.hypot(dx, dy)
        dyaw = _wrap_angle(
            yaw_of_rotation(fix.pose.rotation) - yaw_of_rotation(truth.rotation)
        )
        yaw_ok[i] = abs(dyaw) < np.pi / 4.0
        elapsed[i] = fix.timestamp_s - prev
        prev = fix.timestamp_s

    if frame_times_s is not None and visible_flags is not None and len(frame_times_s) > 1:
        frame_times_s = np.asarray(frame_times_s, dtype=np.float64)
        period = (frame_times_s[-1] - frame_times_s[0]) / (len(frame_times_s) - 1)
        visible = np.asarray(visible_flags, dtype=bool)
        fix_times = {f.timestamp_s for f in fixes}
        hits = sum(1 for ft, vis in zip(frame_times_s, visible) if vis and ft in fix_times)
        denom = visible.sum() * period
        rate = hits / denom if denom > 0 else 0.0
    else:
        duration = (truth_times[-1] - truth_times[0]) if truth_times.size > 1 else 0.0
        rate = len(fixes) / duration if duration > 0 else 0.0

    return RunMetrics(
        errors_m=errors,
        elapsed_s=elapsed,
        fix_rate_hz=float(rate),
        disambiguation_rate=float(yaw_ok.mean()) if fixes else 0.0,
        n_fixes=len(fixes),
        frame_time_ms=float(np.median(frame_timings_ms)) if frame_timings_ms else float("nan"),
    )


# ---------------------------------------------------------------------------
# fix / trace serialization

FIXES_HEADER = "t,x,y,z,qw,qx,qy,qz,node_id,source,quadrant,residual,filtered"
TRACE_HEADER = "t,stage,status"


def fixes_to_csv_text(fixes) -> str:
    from .geometry import quat_from_rotation

    lines = [FIXES_HEADER]
    for f in fixes:
        q = quat_from_rotation(f.pose.rotation)
        tr = f.pose.translation
        lines.append(
            f"{f.timestamp_s:.9f},{tr[0]:.9f},{tr[1]:.9f},{tr[2]:.9f},"
            f"{q[0]:.9f},{q[1]:.9f},{q[2]:.9f},{q[3]:.9f},"
            f"{f.node_id},{f.source},{f.chosen_quadrant},"
            f"{f.reprojection_residual_px:.9f},{int(f.filtered)}"
        )
    return "\n".join(lines) + "\n"


def fixes_from_csv_text(text: str):
    from .geometry import rotation_from_quat

    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != FIXES_HEADER:
        raise PipelineError(f"expected fixes header '{FIXES_HEADER}'")
    out = []
    for ln in lines[1:]:
        parts = ln.split(",")
        if len(parts) != 13:
            raise PipelineError(f"malformed fixes row: {ln!r}")
        pose = RigidTransform(
            rotation_from_quat([float(v) for v in parts[4:8]]),
            np.array([float(v) for v in parts[1:4]]),
        )
        out.append(
            LocalizationFix(
                timestamp_s=float(parts[0]),
                pose=pose,
                node_id=int(parts[8]),
                source=parts[9],
                chosen_quadrant=int(parts[10]),
                reprojection_residual_px=float(parts[11]),
                filtered=bool(int(parts[12])),
            )
        )
    return out


def trace_to_csv_text(trace) -> str:
    lines = [TRACE_HEADER]
    for rec in trace:
        lines.append(f"{rec.timestamp_s:.9f},{rec.stage},{rec.status}")
    return "\n".join(lines) + "\n"
