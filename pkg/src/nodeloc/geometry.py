"""Camera model, rigid transforms, projection and floor-plane intersection.

Conventions used throughout the package:

* World frame: right-handed, z up, floor plane at z = h.
* Camera frame: x right, y down (image row direction), z forward along the
  optical axis. Poses are stored camera-to-world.
* Image coordinates: pixel (u, v) = (column, row); the sample point of
  pixel (i, j) sits at integer coordinates (x=j, y=i).
* Points are plain float64 numpy arrays: shape (2,) for pixels, (3,) for
  camera/world points.

The distortion model is polynomial with three radial and two tangential
coefficients. Undistortion inverts it by fixed-point iteration (at most 20
rounds, verified to 0.05 px).
"""

from dataclasses import dataclass, field

import numpy as np

UNDISTORT_MAX_ITER = 20
UNDISTORT_TOL_PX = 0.05


class GeometryError(ValueError):
    pass


class DegenerateRayError(GeometryError):
    """Ray parallel to the floor plane (or camera in the plane)."""


class BehindCameraError(GeometryError):
    """Point does not lie in front of the camera."""


class UndistortDivergenceError(GeometryError):
    """Fixed-point undistortion failed to converge (extreme distortion)."""


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole model with polynomial distortion.

    fx_px/fy_px are focal lengths in pixels, cx_px/cy_px the principal
    point, radial_coeffs three radial and tangential_coeffs two tangential
    distortion coefficients.
    """

    fx_px: float
    fy_px: float
    cx_px: float
    cy_px: float
    radial_coeffs: tuple = (0.0, 0.0, 0.0)
    tangential_coeffs: tuple = (0.0, 0.0)
    width_px: int = 640
    height_px: int = 480

    def __post_init__(self):
        if not (self.fx_px > 0 and self.fy_px > 0):
            raise GeometryError("focal lengths must be positive")
        if not (0 <= self.cx_px < self.width_px):
            raise GeometryError("cx outside sensor")
        if not (0 <= self.cy_px < self.height_px):
            raise GeometryError("cy outside sensor")
        if len(self.radial_coeffs) != 3 or len(self.tangential_coeffs) != 2:
            raise GeometryError("expected 3 radial + 2 tangential coefficients")
        object.__setattr__(self, "radial_coeffs", tuple(float(c) for c in self.radial_coeffs))
        object.__setattr__(
            self, "tangential_coeffs", tuple(float(c) for c in self.tangential_coeffs)
        )

    @property
    def has_distortion(self) -> bool:
        return any(self.radial_coeffs) or any(self.tangential_coeffs)


def _as_rotation(m) -> np.ndarray:
    r = np.asarray(m, dtype=np.float64)
    if r.shape != (3, 3):
        raise GeometryError("rotation must be 3x3")
    if np.max(np.abs(r.T @ r - np.eye(3))) > 1e-9:
        raise GeometryError("rotation is not orthonormal within 1e-9")
    if abs(np.linalg.det(r) - 1.0) > 1e-9:
        raise GeometryError("rotation determinant is not +1 within 1e-9")
    r.setflags(write=False)
    return r


@dataclass(frozen=True)
class RigidTransform:
    """Rotation + translation; immutable. ``apply`` maps source-frame
    points into the destination frame (camera-to-world for camera poses)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", _as_rotation(self.rotation))
        t = np.asarray(self.translation, dtype=np.float64).reshape(3).copy()
        if not np.all(np.isfinite(t)):
            raise GeometryError("translation must be finite")
        t.setflags(write=False)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    def apply(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64)
        return self.rotation @ p + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self ∘ other: apply ``other`` first, then ``self``."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T.copy()
        return RigidTransform(rt, -rt @ self.translation)

    def orthonormalized(self) -> "RigidTransform":
        """Snap the rotation back onto SO(3) (nearest by Frobenius norm)."""
        u, _, vt = np.linalg.svd(self.rotation)
        r = u @ vt
        if np.linalg.det(r) < 0:
            u[:, 2] *= -1.0
            r = u @ vt
        return RigidTransform(r, self.translation)


@dataclass(frozen=True)
class FloorModel:
    """Horizontal floor plane z = height_m in the world frame."""

    height_m: float = 0.0

    def __post_init__(self):
        if not np.isfinite(self.height_m):
            raise GeometryError("floor height must be finite")


# ---------------------------------------------------------------------------
# rotation helpers


def rot_x(angle_rad: float) -> np.ndarray:
    c, s = np.cos(angle_rad), np.sin(angle_rad)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(angle_rad: float) -> np.ndarray:
    c, s = np.cos(angle_rad), np.sin(angle_rad)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(angle_rad: float) -> np.ndarray:
    c, s = np.cos(angle_rad), np.sin(angle_rad)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def quat_from_rotation(r: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) with a deterministic sign (w >= 0)."""
    r = np.asarray(r, dtype=np.float64)
    tr = r[0, 0] + r[1, 1] + r[2, 2]
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s]
        )
    elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
        s = np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2.0
        q = np.array(
            [(r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s]
        )
    elif r[1, 1] > r[2, 2]:
        s = np.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2]) * 2.0
        q = np.array(
            [(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s]
        )
    else:
        s = np.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1]) * 2.0
        q = np.array(
            [(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s]
        )
    q /= np.linalg.norm(q)
    if q[0] < 0 or (q[0] == 0 and (q[1] < 0 or (q[1] == 0 and (q[2] < 0 or (q[2] == 0 and q[3] < 0))))):
        q = -q
    return q


def rotation_from_quat(q) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def quat_slerp(q0, q1, u: float) -> np.ndarray:
    """Spherical interpolation between unit quaternions, shortest arc."""
    q0 = np.asarray(q0, dtype=np.float64)
    q1 = np.asarray(q1, dtype=np.float64)
    dot = float(np.dot(q0, q1))
    if dot < 0.0:
        q1 = -q1
        dot = -dot
    if dot > 0.9995:
        q = q0 + u * (q1 - q0)
        return q / np.linalg.norm(q)
    theta = np.arccos(min(dot, 1.0))
    s = np.sin(theta)
    return (np.sin((1.0 - u) * theta) * q0 + np.sin(u * theta) * q1) / s


def yaw_of_rotation(r: np.ndarray) -> float:
    """Heading of the rotated x-axis projected on the world xy-plane."""
    return float(np.arctan2(r[1, 0], r[0, 0]))


# ---------------------------------------------------------------------------
# distortion model


def distort_normalized(xy: np.ndarray, k: CameraIntrinsics) -> np.ndarray:
    """Forward distortion on ideal normalized coordinates; works on (..., 2)."""
    xy = np.asarray(xy, dtype=np.float64)
    x = xy[..., 0]
    y = xy[..., 1]
    k1, k2, k3 = k.radial_coeffs
    p1, p2 = k.tangential_coeffs
    r2 = x * x + y * y
    radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3))
    xd = x * radial + 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x)
    yd = y * radial + p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y
    return np.stack([xd, yd], axis=-1)


def distort_pixel(p: np.ndarray, k: CameraIntrinsics) -> np.ndarray:
    """Where an ideal-pinhole pixel lands in the distorted image."""
    p = np.asarray(p, dtype=np.float64)
    n = np.stack(
        [(p[..., 0] - k.cx_px) / k.fx_px, (p[..., 1] - k.cy_px) / k.fy_px], axis=-1
    )
    d = distort_normalized(n, k)
    return np.stack(
        [d[..., 0] * k.fx_px + k.cx_px, d[..., 1] * k.fy_px + k.cy_px], axis=-1
    )


def undistort_normalized(xy_dist: np.ndarray, k: CameraIntrinsics) -> np.ndarray:
    """Invert the distortion model by fixed-point iteration; works on (..., 2)."""
    xy_dist = np.asarray(xy_dist, dtype=np.float64)
    xd = xy_dist[..., 0]
    yd = xy_dist[..., 1]
    k1, k2, k3 = k.radial_coeffs
    p1, p2 = k.tangential_coeffs
    x = xd.copy()
    y = yd.copy()
    for _ in range(UNDISTORT_MAX_ITER):
        r2 = x * x + y * y
        radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3))
        dx = 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x)
        dy = p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y
        x = (xd - dx) / radial
        y = (yd - dy) / radial
    return np.stack([x, y], axis=-1)


def undistort_pixel(p: np.ndarray, k: CameraIntrinsics) -> np.ndarray:
    """Ideal-pinhole position of a distorted pixel.

    Raises UndistortDivergenceError when re-distorting the result does not
    land back on the input within 0.05 px.
    """
    p = np.asarray(p, dtype=np.float64)
    n = np.array([(p[0] - k.cx_px) / k.fx_px, (p[1] - k.cy_px) / k.fy_px])
    u = undistort_normalized(n, k)
    out = np.array([u[0] * k.fx_px + k.cx_px, u[1] * k.fy_px + k.cy_px])
    back = distort_pixel(out, k)
    if np.hypot(back[0] - p[0], back[1] - p[1]) > UNDISTORT_TOL_PX:
        raise UndistortDivergenceError(
            f"undistortion did not converge at pixel {tuple(p)}"
        )
    return out


def undistort_image(img: np.ndarray, k: CameraIntrinsics) -> np.ndarray:
    """Resample a distorted frame onto the ideal pinhole grid.

    Output pixel (u, v) is bilinearly sampled at the forward-distorted
    location of (u, v); samples falling outside the source are 0.
    """
    from ._kernels import bilinear_sample

    h, w = img.shape
    if (w, h) != (k.width_px, k.height_px):
        raise GeometryError(
            f"image {w}x{h} does not match intrinsics {k.width_px}x{k.height_px}"
        )
    if not k.has_distortion:
        return img.copy()
    us, vs = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    grid = np.stack([us, vs], axis=-1)
    src = distort_pixel(grid, k)
    return bilinear_sample(
        img, np.ascontiguousarray(src[..., 0]), np.ascontiguousarray(src[..., 1])
    )


# ---------------------------------------------------------------------------
# projection chain


def pixel_to_unit_plane(c_p, k: CameraIntrinsics) -> np.ndarray:
    """Lift an (undistorted) pixel onto the camera-frame plane z = 1."""
    c_p = np.asarray(c_p, dtype=np.float64)
    return np.array(
        [(c_p[0] - k.cx_px) / k.fx_px, (c_p[1] - k.cy_px) / k.fy_px, 1.0]
    )


def camera_to_world(p_c, wtc: RigidTransform) -> np.ndarray:
    return wtc.apply(p_c)


def intersect_floor(c_w, c_0, floor: FloorModel) -> np.ndarray:
    """Intersect the ray through the camera center c_0 and point c_w with
    the floor plane; the result has z = height exactly."""
    c_w = np.asarray(c_w, dtype=np.float64)
    c_0 = np.asarray(c_0, dtype=np.float64)
    dz = c_0[2] - c_w[2]
    if abs(dz) <= 1e-9:
        raise DegenerateRayError("ray is parallel to the floor plane")
    t = (floor.height_m - c_0[2]) / dz
    out = c_0 + t * (c_0 - c_w)
    out[2] = floor.height_m
    return out


def project_point(p_w, wtc: RigidTransform, k: CameraIntrinsics) -> np.ndarray:
    """Ideal pinhole projection of a world point (no distortion applied)."""
    p_c = wtc.inverse().apply(p_w)
    if p_c[2] <= 1e-6:
        raise BehindCameraError(f"point at camera depth {p_c[2]:.3g}")
    return np.array(
        [k.fx_px * p_c[0] / p_c[2] + k.cx_px, k.fy_px * p_c[1] / p_c[2] + k.cy_px]
    )


# ---------------------------------------------------------------------------
# intrinsics file format: one `key = value` per line

_INTRINSICS_KEYS = ("fx", "fy", "cx", "cy", "k1", "k2", "k3", "p1", "p2", "width", "height")


def intrinsics_to_text(k: CameraIntrinsics) -> str:
    values = {
        "fx": k.fx_px,
        "fy": k.fy_px,
        "cx": k.cx_px,
        "cy": k.cy_px,
        "k1": k.radial_coeffs[0],
        "k2": k.radial_coeffs[1],
        "k3": k.radial_coeffs[2],
        "p1": k.tangential_coeffs[0],
        "p2": k.tangential_coeffs[1],
        "width": k.width_px,
        "height": k.height_px,
    }
    return "".join(f"{key} = {values[key]:.9g}\n" for key in _INTRINSICS_KEYS)


def intrinsics_from_text(text: str) -> CameraIntrinsics:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise GeometryError(f"intrinsics line {lineno}: expected 'key = value'")
        key, _, val = line.partition("=")
        key = key.strip()
        if key not in _INTRINSICS_KEYS:
            raise GeometryError(f"intrinsics line {lineno}: unknown key {key!r}")
        try:
            values[key] = float(val)
        except ValueError as exc:
            raise GeometryError(f"intrinsics line {lineno}: bad number {val!r}") from exc
    missing = [key for key in _INTRINSICS_KEYS if key not in values]
    if missing:
        raise GeometryError(f"intrinsics file missing keys: {', '.join(missing)}")
    return CameraIntrinsics(
        fx_px=values["fx"],
        fy_px=values["fy"],
        cx_px=values["cx"],
        cy_px=values["cy"],
        radial_coeffs=(values["k1"], values["k2"], values["k3"]),
        tangential_coeffs=(values["p1"], values["p2"]),
        width_px=int(values["width"]),
        height_px=int(values["height"]),
    )


def save_intrinsics(path, k: CameraIntrinsics) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write(intrinsics_to_text(k))


def load_intrinsics(path) -> CameraIntrinsics:
    with open(path, "r", encoding="ascii") as fh:
        return intrinsics_from_text(fh.read())
