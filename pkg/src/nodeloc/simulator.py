"""Synthetic warehouse: analytic floor rendering with exact ground truth,
scenario trajectory generation, drifting odometry synthesis and dataset
serialization.

Node artwork is procedural (white disc, 3x3 grid of dark elements: five
solid blobs, a solid orientation-marker disc on corner 0 and identity codes
on the other three corners), so every blob center has an exact world
position. Rendering casts one ray per subpixel sample through the forward
distortion model onto the floor plane; motion blur averages subframe
renders along the inter-frame motion and sensor noise is added once per
frame from a per-frame seed.
"""

import os
from dataclasses import dataclass, field

import numpy as np

from ._accel import USE_NUMBA
from . import imaging
from .floorid import GroundNode, NodeDatabase, load_node_db_csv, save_node_db_csv
from .geometry import (
    CameraIntrinsics,
    RigidTransform,
    distort_pixel,
    intrinsics_to_text,
    load_intrinsics,
    quat_from_rotation,
    quat_slerp,
    rotation_from_quat,
    rot_x,
    rot_y,
    rot_z,
    save_intrinsics,
    undistort_normalized,
)
from .gridpose import NodeGeometry
from .nodecode import CodePayload, encode

if USE_NUMBA:
    from numba import njit


DOWNWARD = np.array([[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]])

SCENARIO_KINDS = ("fast-walk", "slow-walk", "backward-walk", "stand", "crouch-walk")
WALK_SPEED = {"fast-walk": 1.8, "slow-walk": 0.8, "backward-walk": -0.8, "crouch-walk": 0.5}
STEP_HZ = {"fast-walk": 2.0, "slow-walk": 1.6, "backward-walk": 1.6, "crouch-walk": 1.4, "stand": 0.5}
BOB_AMPLITUDE_M = 0.03
TILT_AMPLITUDE_RAD = np.deg2rad(5.0)
SWAY_AMPLITUDE_M = 0.08
SWAY_HZ = 0.15
CROUCH_STAND_S = 1.5
CROUCH_RAMP_S = 1.0


class SimulatorError(ValueError):
    pass


@dataclass(frozen=True)
class Scenario:
    kind: str
    duration_s: float
    frame_rate_hz: float = 5.0
    walk_height_m: float = 1.0
    crouch_height_m: float = 0.6

    def __post_init__(self):
        if self.kind not in SCENARIO_KINDS:
            raise SimulatorError(f"unknown scenario kind {self.kind!r}")
        if self.frame_rate_hz <= 0 or self.duration_s <= 0:
            raise SimulatorError("duration and frame rate must be positive")


@dataclass(frozen=True)
class RenderSettings:
    illumination_lux: float = 300.0
    motion_blur: float = 0.05  # exposed fraction of the inter-frame motion
    noise_sigma: float = 1.5
    supersample: int = 3  # n x n subpixel rays per pixel

    def __post_init__(self):
        if self.illumination_lux <= 0:
            raise SimulatorError("illumination must be positive")
        if not 0.0 <= self.motion_blur <= 1.0:
            raise SimulatorError("motion blur fraction must be in [0, 1]")
        if self.noise_sigma < 0:
            raise SimulatorError("noise sigma must be non-negative")
        if self.supersample < 1:
            raise SimulatorError("supersample factor must be >= 1")


@dataclass(frozen=True)
class Scene:
    """World content: surveyed nodes, node artwork dimensions, floor albedo
    and box obstacles that occlude the floor."""

    nodes: NodeDatabase
    geometry: NodeGeometry = field(default_factory=NodeGeometry)
    floor_albedo: float = 170.0
    obstacles: tuple = ()  # (x0, y0, x1, y1) world rectangles
    node_disc_radius_m: float = 0.13
    blob_radius_m: float = 0.014
    marker_radius_m: float = 0.014
    white_albedo: float = 255.0
    dark_albedo: float = 15.0
    obstacle_albedo: float = 40.0
    floor_texture_amp: float = 9.0
    disc_texture_amp: float = 7.0
    texture_scale_m: float = 0.025
    bounds_margin_m: float = 5.0

    def bounds(self):
        xs = [n.world_xy_m[0] for n in self.nodes] or [0.0]
        ys = [n.world_xy_m[1] for n in self.nodes] or [0.0]
        m = self.bounds_margin_m
        return (min(xs) - m, min(ys) - m, max(xs) + m, max(ys) + m)

    def floor_height(self) -> float:
        heights = {n.floor_height_m for n in self.nodes}
        return heights.pop() if len(heights) == 1 else 0.0


def brightness_factor(lux: float) -> float:
    """Linear lux-to-gain map: mean frame intensity is about 60 at 160 lux
    and about 160 at 500 lux for the default albedos."""
    return float(np.clip(0.375 + (lux - 160.0) * 0.625 / 340.0, 0.02, 3.0))


def aisle_scene(
    n_nodes: int = 5,
    spacing_m: float = 1.5,
    start_x: float = 0.0,
    direction: float = 1.0,
    with_obstacles: bool = True,
    **scene_kwargs,
) -> Scene:
    """A line of nodes along the x axis with rack boxes on both sides."""
    nodes = [
        GroundNode(i, np.array([start_x + direction * spacing_m * i, 0.0]), 0.0)
        for i in range(n_nodes)
    ]
    x0 = min(n.world_xy_m[0] for n in nodes) - 2.0
    x1 = max(n.world_xy_m[0] for n in nodes) + 2.0
    obstacles = ((x0, 1.0, x1, 1.8), (x0, -1.8, x1, -1.0)) if with_obstacles else ()
    return Scene(nodes=NodeDatabase(nodes), obstacles=obstacles, **scene_kwargs)


# ---------------------------------------------------------------------------
# trajectories


def generate_trajectory(scene: Scene, scenario: Scenario, seed: int = 0):
    """Timestamped camera-to-world poses at the scenario frame rate.

    The first pose is directly above the lowest-id node, looking straight
    down; walking adds bob, sway and roll/pitch oscillation at the step
    frequency (all zero-phase so the anchor pose stays exact).
    """
    nodes = sorted(scene.nodes, key=lambda n: n.id)
    if not nodes:
        raise SimulatorError("scene has no nodes")
    start = nodes[0].world_xy_m
    floor_h = scene.floor_height()
    n_frames = int(round(scenario.duration_s * scenario.frame_rate_hz))
    if n_frames < 1:
        raise SimulatorError("scenario produces no frames")
    speed = WALK_SPEED.get(scenario.kind, 0.0)
    step_hz = STEP_HZ[scenario.kind]
    xmin, ymin, xmax, ymax = scene.bounds()

    out = []
    for i in range(n_frames):
        t = i / scenario.frame_rate_hz
        if scenario.kind == "stand":
            x, y = float(start[0]), float(start[1])
            z = scenario.walk_height_m
            gate = 1.0
        elif scenario.kind == "crouch-walk":
            if t < CROUCH_STAND_S:
                walked = 0.0
                z = scenario.walk_height_m
                gate = 0.0
            elif t < CROUCH_STAND_S + CROUCH_RAMP_S:
                walked = 0.0
                u = (t - CROUCH_STAND_S) / CROUCH_RAMP_S
                z = scenario.walk_height_m + u * (scenario.crouch_height_m - scenario.walk_height_m)
                gate = 0.0
            else:
                tw = t - CROUCH_STAND_S - CROUCH_RAMP_S
                walked = speed * tw
                z = scenario.crouch_height_m + BOB_AMPLITUDE_M * np.sin(2 * np.pi * step_hz * tw)
                gate = 1.0
            x = float(start[0]) + walked
            y = float(start[1]) + gate * SWAY_AMPLITUDE_M * np.sin(2 * np.pi * SWAY_HZ * t)
        else:
            x = float(start[0]) + speed * t
            y = float(start[1]) + SWAY_AMPLITUDE_M * np.sin(2 * np.pi * SWAY_HZ * t)
            z = scenario.walk_height_m + BOB_AMPLITUDE_M * np.sin(2 * np.pi * step_hz * t)
            gate = 1.0
        if not (xmin <= x <= xmax and ymin <= y <= ymax):
            raise SimulatorError(f"trajectory leaves scene bounds at t={t:.2f}s")
        roll = gate * TILT_AMPLITUDE_RAD * np.sin(2 * np.pi * step_hz * t)
        pitch = gate * TILT_AMPLITUDE_RAD * np.sin(np.pi * step_hz * t)
        rot = rot_z(0.0) @ rot_y(pitch) @ rot_x(roll) @ DOWNWARD
        out.append((t, RigidTransform(rot, np.array([x, y, floor_h + z]))))
    return out


# ---------------------------------------------------------------------------
# rendering


def _hash2(i, j):
    s = np.sin(i * 127.1 + j * 311.7 + 0.345) * 43758.5453
    return s - np.floor(s)


def _value_noise(u, v):
    """Deterministic smooth value noise in [-1, 1] (works on scalars and
    arrays; identical formula in both render backends)."""
    i = np.floor(u)
    j = np.floor(v)
    fu = u - i
    fv = v - j
    fu = fu * fu * (3.0 - 2.0 * fu)
    fv = fv * fv * (3.0 - 2.0 * fv)
    h00 = _hash2(i, j)
    h10 = _hash2(i + 1.0, j)
    h01 = _hash2(i, j + 1.0)
    h11 = _hash2(i + 1.0, j + 1.0)
    return 2.0 * ((h00 * (1.0 - fu) + h10 * fu) * (1.0 - fv) + (h01 * (1.0 - fu) + h11 * fu) * fv) - 1.0


if USE_NUMBA:
    _hash2 = njit(cache=True)(_hash2)
    _value_noise = njit(cache=True)(_value_noise)


def _pack_scene(scene: Scene):
    nodes = list(scene.nodes)
    n = len(nodes)
    node_x = np.array([nd.world_xy_m[0] for nd in nodes], np.float64)
    node_y = np.array([nd.world_xy_m[1] for nd in nodes], np.float64)
    cos_yaw = np.array([np.cos(nd.yaw_rad) for nd in nodes], np.float64)
    sin_yaw = np.array([np.sin(nd.yaw_rad) for nd in nodes], np.float64)
    cells = np.zeros((max(n, 1), 4, 10, 10), np.uint8)
    for i, nd in enumerate(nodes):
        for corner in range(4):
            if corner == scene.geometry.orientation_marker_corner:
                continue
            cells[i, corner] = encode(
                CodePayload(node_id=nd.id, corner_index=corner)
            ).astype(np.uint8)
    obstacles = (
        np.array(scene.obstacles, np.float64).reshape(-1, 4)
        if scene.obstacles
        else np.zeros((0, 4))
    )
    params = np.array(
        [
            scene.floor_albedo,
            scene.obstacle_albedo,
            scene.white_albedo,
            scene.dark_albedo,
            scene.node_disc_radius_m,
            scene.geometry.pitch_m,
            scene.geometry.code_size_m,
            scene.blob_radius_m,
            scene.marker_radius_m,
            float(scene.geometry.orientation_marker_corner),
            scene.floor_texture_amp,
            scene.disc_texture_amp,
            scene.texture_scale_m,
        ],
        np.float64,
    )
    return node_x, node_y, cos_yaw, sin_yaw, cells, obstacles, params


def _albedo_accumulate_loops(
    acc, ideal_x, ideal_y, du, dv, fx, fy, cx, cy, rot, origin, floor_h,
    node_x, node_y, cos_yaw, sin_yaw, cells, obstacles, params,
):
    h, w = acc.shape
    floor_albedo = params[0]
    obstacle_albedo = params[1]
    white = params[2]
    dark = params[3]
    disc_r2 = params[4] * params[4]
    pitch = params[5]
    code_size = params[6]
    blob_r2 = params[7] * params[7]
    marker_r2 = params[8] * params[8]
    marker_corner = int(params[9])
    tex_amp = params[10]
    disc_tex_amp = params[11]
    tex_scale = params[12]
    n_nodes = node_x.shape[0]
    n_obs = obstacles.shape[0]
    ox, oy, oz = origin[0], origin[1], origin[2]
    for py in range(h):
        for px in range(w):
            dx_c = (ideal_x[py, px] + du - cx) / fx
            dy_c = (ideal_y[py, px] + dv - cy) / fy
            wx = rot[0, 0] * dx_c + rot[0, 1] * dy_c + rot[0, 2]
            wy = rot[1, 0] * dx_c + rot[1, 1] * dy_c + rot[1, 2]
            wz = rot[2, 0] * dx_c + rot[2, 1] * dy_c + rot[2, 2]
            if wz >= -1e-9:
                continue  # ray does not hit the floor; leave dark
            t = (floor_h - oz) / wz
            x = ox + t * wx
            y = oy + t * wy
            value = floor_albedo + tex_amp * _value_noise(x / tex_scale, y / tex_scale)
            occluded = False
            for m in range(n_obs):
                if obstacles[m, 0] <= x <= obstacles[m, 2] and obstacles[m, 1] <= y <= obstacles[m, 3]:
                    value = obstacle_albedo + 0.4 * tex_amp * _value_noise(
                        x / tex_scale, y / tex_scale
                    )
                    occluded = True
                    break
            if not occluded:
                for nn in range(n_nodes):
                    ddx = x - node_x[nn]
                    ddy = y - node_y[nn]
                    if ddx * ddx + ddy * ddy > disc_r2:
                        continue
                    lx = cos_yaw[nn] * ddx + sin_yaw[nn] * ddy
                    ly = -sin_yaw[nn] * ddx + cos_yaw[nn] * ddy
                    # disc texture is node-anchored so it matches the reference
                    value = white + disc_tex_amp * _value_noise(
                        lx / tex_scale + 37.2, ly / tex_scale - 11.8
                    )
                    cxi = int(np.floor(lx / pitch + 0.5))
                    cyi = int(np.floor(ly / pitch + 0.5))
                    if -1 <= cxi <= 1 and -1 <= cyi <= 1:
                        loc_x = lx - cxi * pitch
                        loc_y = ly - cyi * pitch
                        r2 = loc_x * loc_x + loc_y * loc_y
                        if cxi == 0 or cyi == 0:
                            if r2 <= blob_r2:
                                value = dark
                        else:
                            if cxi == -1 and cyi == -1:
                                corner = 0
                            elif cxi == 1 and cyi == -1:
                                corner = 1
                            elif cxi == 1 and cyi == 1:
                                corner = 2
                            else:
                                corner = 3
                            if corner == marker_corner:
                                if r2 <= marker_r2:
                                    value = dark
                            else:
                                # identity code printed on a blob-sized dark disc
                                half = code_size / 2.0
                                if -half <= loc_x < half and -half < loc_y <= half:
                                    col = int((loc_x + half) / code_size * 10.0)
                                    row = int((half - loc_y) / code_size * 10.0)
                                    if col > 9:
                                        col = 9
                                    if row > 9:
                                        row = 9
                                    if cells[nn, corner, row, col]:
                                        value = dark
                                elif r2 <= blob_r2:
                                    value = dark
                    break
            acc[py, px] += value
    return acc


def _albedo_accumulate_numpy(
    acc, ideal_x, ideal_y, du, dv, fx, fy, cx, cy, rot, origin, floor_h,
    node_x, node_y, cos_yaw, sin_yaw, cells, obstacles, params,
):
    floor_albedo, obstacle_albedo, white, dark = params[0], params[1], params[2], params[3]
    disc_r2 = params[4] ** 2
    pitch, code_size = params[5], params[6]
    blob_r2, marker_r2 = params[7] ** 2, params[8] ** 2
    marker_corner = int(params[9])
    tex_amp, disc_tex_amp, tex_scale = params[10], params[11], params[12]

    dx_c = (ideal_x + du - cx) / fx
    dy_c = (ideal_y + dv - cy) / fy
    wx = rot[0, 0] * dx_c + rot[0, 1] * dy_c + rot[0, 2]
    wy = rot[1, 0] * dx_c + rot[1, 1] * dy_c + rot[1, 2]
    wz = rot[2, 0] * dx_c + rot[2, 1] * dy_c + rot[2, 2]
    hits = wz < -1e-9
    t = np.where(hits, (floor_h - origin[2]) / np.where(hits, wz, -1.0), 0.0)
    x = origin[0] + t * wx
    y = origin[1] + t * wy

    world_tex = _value_noise(x / tex_scale, y / tex_scale)
    value = np.where(hits, floor_albedo + tex_amp * world_tex, 0.0)
    occluded = np.zeros(acc.shape, bool)
    for m in range(obstacles.shape[0]):
        inside = (
            hits
            & (x >= obstacles[m, 0])
            & (x <= obstacles[m, 2])
            & (y >= obstacles[m, 1])
            & (y <= obstacles[m, 3])
        )
        value = np.where(
            inside & ~occluded, obstacle_albedo + 0.4 * tex_amp * world_tex, value
        )
        occluded |= inside
    claimed = occluded.copy()
    for nn in range(node_x.shape[0]):
        ddx = x - node_x[nn]
        ddy = y - node_y[nn]
        on_disc = hits & ~claimed & (ddx * ddx + ddy * ddy <= disc_r2)
        if not on_disc.any():
            continue
        claimed |= on_disc
        lx = cos_yaw[nn] * ddx + sin_yaw[nn] * ddy
        ly = -sin_yaw[nn] * ddx + cos_yaw[nn] * ddy
        # disc texture is node-anchored so it matches the reference
        value = np.where(
            on_disc,
            white
            + disc_tex_amp * _value_noise(lx / tex_scale + 37.2, ly / tex_scale - 11.8),
            value,
        )
        cxi = np.floor(lx / pitch + 0.5).astype(np.int64)
        cyi = np.floor(ly / pitch + 0.5).astype(np.int64)
        in_grid = on_disc & (np.abs(cxi) <= 1) & (np.abs(cyi) <= 1)
        loc_x = lx - cxi * pitch
        loc_y = ly - cyi * pitch
        r2 = loc_x * loc_x + loc_y * loc_y
        plain = in_grid & ((cxi == 0) | (cyi == 0))
        value = np.where(plain & (r2 <= blob_r2), dark, value)
        corner_mask = in_grid & (cxi != 0) & (cyi != 0)
        corner_id = np.where(
            cyi == -1, np.where(cxi == -1, 0, 1), np.where(cxi == 1, 2, 3)
        )
        marker = corner_mask & (corner_id == marker_corner)
        value = np.where(marker & (r2 <= marker_r2), dark, value)
        # identity codes printed on a blob-sized dark disc
        half = code_size / 2.0
        code_disc = corner_mask & (corner_id != marker_corner)
        in_square = (
            code_disc
            & (loc_x >= -half)
            & (loc_x < half)
            & (loc_y > -half)
            & (loc_y <= half)
        )
        value = np.where(code_disc & ~in_square & (r2 <= blob_r2), dark, value)
        if in_square.any():
            col = np.clip(((loc_x + half) / code_size * 10.0).astype(np.int64), 0, 9)
            row = np.clip(((half - loc_y) / code_size * 10.0).astype(np.int64), 0, 9)
            cell_dark = np.zeros(acc.shape, bool)
            ys, xs = np.nonzero(in_square)
            cell_dark[ys, xs] = cells[nn, corner_id[ys, xs], row[ys, xs], col[ys, xs]] > 0
            value = np.where(in_square & cell_dark, dark, value)
    acc += value
    return acc


if USE_NUMBA:
    _albedo_accumulate = njit(cache=True)(_albedo_accumulate_loops)
else:
    _albedo_accumulate = _albedo_accumulate_numpy


_IDEAL_GRID_CACHE = {}


def _ideal_grid(k: CameraIntrinsics):
    """Undistorted (ideal) pixel position of every sensor pixel; cached."""
    key = (
        k.fx_px, k.fy_px, k.cx_px, k.cy_px, k.radial_coeffs, k.tangential_coeffs,
        k.width_px, k.height_px,
    )
    if key not in _IDEAL_GRID_CACHE:
        us, vs = np.meshgrid(
            np.arange(k.width_px, dtype=np.float64),
            np.arange(k.height_px, dtype=np.float64),
        )
        if k.has_distortion:
            norm = np.stack(
                [(us - k.cx_px) / k.fx_px, (vs - k.cy_px) / k.fy_px], axis=-1
            )
            ideal = undistort_normalized(norm, k)
            ix = ideal[..., 0] * k.fx_px + k.cx_px
            iy = ideal[..., 1] * k.fy_px + k.cy_px
        else:
            ix, iy = us, vs
        _IDEAL_GRID_CACHE[key] = (
            np.ascontiguousarray(ix),
            np.ascontiguousarray(iy),
        )
    return _IDEAL_GRID_CACHE[key]


def _interp_pose(a: RigidTransform, b: RigidTransform, u: float) -> RigidTransform:
    t = (1.0 - u) * a.translation + u * b.translation
    q = quat_slerp(quat_from_rotation(a.rotation), quat_from_rotation(b.rotation), u)
    return RigidTransform(rotation_from_quat(q), t)


def _estimate_smear_px(pose, pose_next, k, blur, floor_h):
    height = max(0.05, pose.translation[2] - floor_h)
    planar = float(np.hypot(*(pose_next.translation[:2] - pose.translation[:2])))
    dyaw = abs(
        np.arccos(
            np.clip((np.trace(pose.rotation.T @ pose_next.rotation) - 1.0) / 2.0, -1.0, 1.0)
        )
    )
    return blur * (planar / height * k.fx_px + dyaw * k.width_px / 2.0)


def render_frame(
    scene: Scene,
    pose: RigidTransform,
    k: CameraIntrinsics,
    settings: RenderSettings = RenderSettings(),
    pose_next: RigidTransform = None,
    frame_seed: int = 0,
) -> np.ndarray:
    """One camera frame: per-pixel floor ray casting with the forward
    distortion model, 2x2 subpixel antialiasing, motion-blur subframes
    toward ``pose_next`` and clamped additive Gaussian sensor noise."""
    floor_h = scene.floor_height()
    if pose.translation[2] <= floor_h:
        raise SimulatorError("camera is at or below the floor plane")
    packed = _pack_scene(scene)
    ix, iy = _ideal_grid(k)
    if settings.motion_blur > 0.0 and pose_next is not None:
        smear = _estimate_smear_px(pose, pose_next, k, settings.motion_blur, floor_h)
        n_sub = int(np.clip(np.ceil(smear), 1, 256))
    else:
        n_sub = 1
    # heavy smears anti-alias along the motion by themselves; reduce (but
    # keep) the subpixel grid so transverse edges stay alias-free while the
    # ray budget remains bounded
    n_ss = settings.supersample if n_sub <= 16 else min(settings.supersample, 2)
    offsets = [
        ((i + 0.5) / n_ss - 0.5, (j + 0.5) / n_ss - 0.5)
        for j in range(n_ss)
        for i in range(n_ss)
    ]
    acc = np.zeros((k.height_px, k.width_px))
    for s in range(n_sub):
        if n_sub == 1:
            sub_pose = pose
        else:
            u = settings.motion_blur * s / (n_sub - 1)
            sub_pose = _interp_pose(pose, pose_next, u)
        rot = np.ascontiguousarray(sub_pose.rotation)
        origin = np.ascontiguousarray(sub_pose.translation)
        for du, dv in offsets:
            _albedo_accumulate(
                acc, ix, iy, du, dv, k.fx_px, k.fy_px, k.cx_px,
                k.cy_px, rot, origin, floor_h, *packed,
            )
    img = acc * (brightness_factor(settings.illumination_lux) / (len(offsets) * n_sub))
    if settings.noise_sigma > 0:
        rng = np.random.default_rng(frame_seed)
        img = img + rng.normal(0.0, settings.noise_sigma, img.shape)
    return np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)


def render_reference_image(
    scene: Scene,
    k: CameraIntrinsics,
    height_m: float = 1.0,
    lux: float = 300.0,
    view_yaw_rad: float = np.deg2rad(15.0),
) -> np.ndarray:
    """Clean frontal crop of the first node, used as the matching reference.

    The view is yawed off the pixel lattice by default; a lattice-aligned
    reference would match lattice-aligned node orientations much better
    than oblique ones, and the matcher should behave uniformly over yaw.
    """
    nodes = sorted(scene.nodes, key=lambda n: n.id)
    if not nodes:
        raise SimulatorError("scene has no nodes")
    target = nodes[0]
    floor_h = scene.floor_height()
    pose = RigidTransform(
        rot_z(view_yaw_rad) @ DOWNWARD,
        np.array([target.world_xy_m[0], target.world_xy_m[1], floor_h + height_m]),
    )
    frame = render_frame(
        scene, pose, k, RenderSettings(illumination_lux=lux, motion_blur=0.0, noise_sigma=0.0),
    )
    radius_px = int(np.ceil(scene.node_disc_radius_m / height_m * k.fx_px)) + 20
    cx, cy = int(round(k.cx_px)), int(round(k.cy_px))
    x0, x1 = max(0, cx - radius_px), min(k.width_px, cx + radius_px + 1)
    y0, y1 = max(0, cy - radius_px), min(k.height_px, cy + radius_px + 1)
    return frame[y0:y1, x0:x1].copy()


def node_fully_visible(scene: Scene, pose: RigidTransform, k: CameraIntrinsics):
    """Id of a node whose full disc projects inside the frame (and is not
    occluded by an obstacle box), or None. Prefers the node nearest the
    image center."""
    from .geometry import BehindCameraError, project_point

    floor_h = scene.floor_height()
    best = None
    angles = np.linspace(0.0, 2.0 * np.pi, 16, endpoint=False)
    rim = np.stack([np.cos(angles), np.sin(angles)], axis=1) * scene.node_disc_radius_m
    for node in scene.nodes:
        pts_w = [np.array([node.world_xy_m[0], node.world_xy_m[1], floor_h])]
        pts_w += [
            np.array([node.world_xy_m[0] + r[0], node.world_xy_m[1] + r[1], floor_h])
            for r in rim
        ]
        ok = True
        for p in pts_w:
            for (ox0, oy0, ox1, oy1) in scene.obstacles:
                if ox0 <= p[0] <= ox1 and oy0 <= p[1] <= oy1:
                    ok = False
                    break
            if not ok:
                break
            try:
                ideal = project_point(p, pose, k)
            except BehindCameraError:
                ok = False
                break
            # reject on the ideal projection first: the polynomial distortion
            # folds far-outside points back into the frame
            if not (
                -k.width_px <= ideal[0] <= 2 * k.width_px
                and -k.height_px <= ideal[1] <= 2 * k.height_px
            ):
                ok = False
                break
            pix = distort_pixel(ideal, k)
            if not (0 <= pix[0] <= k.width_px - 1 and 0 <= pix[1] <= k.height_px - 1):
                ok = False
                break
        if not ok:
            continue
        center_pix = distort_pixel(
            project_point(pts_w[0], pose, k), k
        )
        d = float(np.hypot(center_pix[0] - k.cx_px, center_pix[1] - k.cy_px))
        if best is None or d < best[1]:
            best = (node.id, d)
    return None if best is None else best[0]


# ---------------------------------------------------------------------------
# odometry synthesis


@dataclass(frozen=True)
class OdometryStream:
    times_s: np.ndarray
    poses: tuple

    def pose_at(self, t: float) -> RigidTransform:
        return interp_pose_track(self.times_s, self.poses, t)


def interp_pose_track(times, poses, t: float) -> RigidTransform:
    """Linear position / slerp rotation interpolation with clamped ends."""
    times = np.asarray(times, dtype=np.float64)
    if times.size == 0:
        raise SimulatorError("empty pose track")
    if t <= times[0]:
        return poses[0]
    if t >= times[-1]:
        return poses[-1]
    i = int(np.searchsorted(times, t, side="right")) - 1
    span = times[i + 1] - times[i]
    u = 0.0 if span <= 0 else float((t - times[i]) / span)
    return _interp_pose(poses[i], poses[i + 1], u)


def synth_odometry(
    truth,
    sigma_pos: float = 0.02,
    sigma_yaw: float = 0.01,
    seed: int = 0,
    rate_hz: float = 20.0,
) -> OdometryStream:
    """Truth resampled to the odometry rate with accumulated random-walk
    error (per-axis position sigma and yaw sigma, both per sqrt-second);
    the first sample carries zero error."""
    if len(truth) < 2:
        raise SimulatorError("need at least two truth poses")
    t_times = np.array([t for t, _ in truth])
    t_poses = [p for _, p in truth]
    dt = 1.0 / rate_hz
    times = t_times[0] + dt * np.arange(int(np.floor((t_times[-1] - t_times[0]) / dt)) + 1)
    rng = np.random.default_rng(seed)
    n = times.size
    steps_pos = rng.normal(0.0, sigma_pos * np.sqrt(dt), size=(n - 1, 3))
    steps_yaw = rng.normal(0.0, sigma_yaw * np.sqrt(dt), size=n - 1)
    drift_pos = np.vstack([np.zeros(3), np.cumsum(steps_pos, axis=0)])
    drift_yaw = np.concatenate([[0.0], np.cumsum(steps_yaw)])
    poses = []
    for i, t in enumerate(times):
        base = interp_pose_track(t_times, t_poses, float(t))
        poses.append(
            RigidTransform(
                rot_z(drift_yaw[i]) @ base.rotation, base.translation + drift_pos[i]
            )
        )
    return OdometryStream(times_s=times, poses=tuple(poses))


# ---------------------------------------------------------------------------
# dataset I/O


def _pose_csv_text(times, poses) -> str:
    lines = ["t,x,y,z,qw,qx,qy,qz"]
    for t, pose in zip(times, poses):
        q = quat_from_rotation(pose.rotation)
        tr = pose.translation
        lines.append(
            f"{t:.9f},{tr[0]:.9f},{tr[1]:.9f},{tr[2]:.9f},"
            f"{q[0]:.9f},{q[1]:.9f},{q[2]:.9f},{q[3]:.9f}"
        )
    return "\n".join(lines) + "\n"


def _parse_pose_csv(path):
    with open(path, "r", encoding="ascii") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or lines[0] != "t,x,y,z,qw,qx,qy,qz":
        raise SimulatorError(f"{path}: expected header 't,x,y,z,qw,qx,qy,qz'")
    times = []
    poses = []
    for ln in lines[1:]:
        vals = [float(v) for v in ln.split(",")]
        if len(vals) != 8:
            raise SimulatorError(f"{path}: malformed row {ln!r}")
        times.append(vals[0])
        poses.append(
            RigidTransform(rotation_from_quat(vals[4:8]), np.array(vals[1:4]))
        )
    return np.array(times), tuple(poses)


@dataclass(frozen=True)
class Dataset:
    directory: str
    frame_paths: tuple
    frame_times_s: np.ndarray
    truth_poses: tuple
    odometry: OdometryStream
    nodes: NodeDatabase
    intrinsics: CameraIntrinsics
    manifest: dict

    def load_frame(self, index: int) -> np.ndarray:
        return imaging.read_pgm(self.frame_paths[index])


def write_dataset(
    directory,
    frames,
    frame_times,
    truth_poses,
    odometry: OdometryStream,
    nodes: NodeDatabase,
    k: CameraIntrinsics,
    manifest_extra: dict = None,
) -> str:
    """Serialize a rendered run: P5 frames, truth/odometry pose CSVs, the
    node table, intrinsics and a manifest. Returns the manifest path."""
    if not (len(frames) == len(frame_times) == len(truth_poses)):
        raise SimulatorError("frames, times and truth poses must align")
    os.makedirs(directory, exist_ok=True)
    for i, frame in enumerate(frames):
        imaging.write_pgm(os.path.join(directory, f"frame_{i:06d}.pgm"), frame)
    with open(os.path.join(directory, "truth.csv"), "w", encoding="ascii") as fh:
        fh.write(_pose_csv_text(frame_times, truth_poses))
    with open(os.path.join(directory, "odometry.csv"), "w", encoding="ascii") as fh:
        fh.write(_pose_csv_text(odometry.times_s, odometry.poses))
    save_node_db_csv(os.path.join(directory, "nodes.csv"), nodes)
    save_intrinsics(os.path.join(directory, "intrinsics.txt"), k)
    manifest = {"frames": str(len(frames))}
    for key, value in (manifest_extra or {}).items():
        manifest[str(key)] = str(value)
    manifest_path = os.path.join(directory, "manifest.txt")
    with open(manifest_path, "w", encoding="ascii") as fh:
        for key in sorted(manifest):
            fh.write(f"{key} = {manifest[key]}\n")
    return manifest_path


def read_dataset(directory) -> Dataset:
    manifest_path = os.path.join(directory, "manifest.txt")
    if not os.path.exists(manifest_path):
        raise SimulatorError(f"{directory}: no manifest.txt (not a dataset)")
    manifest = {}
    with open(manifest_path, "r", encoding="ascii") as fh:
        for raw in fh:
            line = raw.strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            manifest[key.strip()] = value.strip()
    n_frames = int(manifest.get("frames", "0"))
    frame_paths = tuple(
        os.path.join(directory, f"frame_{i:06d}.pgm") for i in range(n_frames)
    )
    for p in frame_paths:
        if not os.path.exists(p):
            raise SimulatorError(f"missing frame file {p}")
    times, truth = _parse_pose_csv(os.path.join(directory, "truth.csv"))
    odo_times, odo_poses = _parse_pose_csv(os.path.join(directory, "odometry.csv"))
    nodes = load_node_db_csv(os.path.join(directory, "nodes.csv"))
    k = load_intrinsics(os.path.join(directory, "intrinsics.txt"))
    return Dataset(
        directory=str(directory),
        frame_paths=frame_paths,
        frame_times_s=times,
        truth_poses=truth,
        odometry=OdometryStream(odo_times, odo_poses),
        nodes=nodes,
        intrinsics=k,
        manifest=manifest,
    )
