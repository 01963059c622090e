"""Node identification by floor back-projection: intersect the camera ray
through the detected node center with the floor plane and match the nearest
database node, gated on how recently an absolute detection anchored the
drifting prior.

The node database is a CSV table (header ``id,x,y,yaw,height``, SI units).
Nearest-neighbor queries run as a vectorized scan over the coordinate
arrays, which is exact by construction.
"""

from dataclasses import dataclass

import numpy as np

from .geometry import (
    CameraIntrinsics,
    FloorModel,
    RigidTransform,
    camera_to_world,
    intersect_floor,
    pixel_to_unit_plane,
)

DEFAULT_MAX_IDENT_DIST_M = 0.75  # half the nominal 1.5 m node spacing
DEFAULT_PRIOR_AGE_LIMIT_S = 10.0


class NodeDatabaseError(ValueError):
    pass


@dataclass(frozen=True)
class GroundNode:
    id: int
    world_xy_m: np.ndarray
    yaw_rad: float
    floor_height_m: float = 0.0

    def __post_init__(self):
        xy = np.asarray(self.world_xy_m, dtype=np.float64).reshape(2).copy()
        xy.setflags(write=False)
        object.__setattr__(self, "world_xy_m", xy)


class NodeDatabase:
    """Immutable collection of surveyed ground nodes with exact nearest
    lookup; safe for concurrent reads."""

    def __init__(self, nodes):
        nodes = list(nodes)
        ids = [n.id for n in nodes]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise NodeDatabaseError(f"duplicate node ids: {dupes}")
        self._nodes = tuple(nodes)
        self._by_id = {n.id: n for n in nodes}
        self._xy = (
            np.array([n.world_xy_m for n in nodes], dtype=np.float64)
            if nodes
            else np.zeros((0, 2))
        )

    def __len__(self):
        return len(self._nodes)

    def __iter__(self):
        return iter(self._nodes)

    def get(self, node_id: int):
        return self._by_id.get(int(node_id))

    def nearest(self, point_xy):
        """(node, distance) of the closest node, ties toward the smaller id;
        None for an empty database."""
        if not self._nodes:
            return None
        p = np.asarray(point_xy, dtype=np.float64).reshape(2)
        d = np.hypot(self._xy[:, 0] - p[0], self._xy[:, 1] - p[1])
        best = min(range(len(self._nodes)), key=lambda i: (d[i], self._nodes[i].id))
        return self._nodes[best], float(d[best])


def load_node_db(rows) -> NodeDatabase:
    """Build a database from (id, x, y, yaw[, height]) rows."""
    nodes = []
    for row in rows:
        row = list(row)
        if len(row) not in (4, 5):
            raise NodeDatabaseError(f"malformed node row: {row!r}")
        try:
            node_id = int(row[0])
            x, y, yaw = (float(v) for v in row[1:4])
            height = float(row[4]) if len(row) == 5 else 0.0
        except (TypeError, ValueError) as exc:
            raise NodeDatabaseError(f"malformed node row: {row!r}") from exc
        nodes.append(GroundNode(node_id, np.array([x, y]), yaw, height))
    return NodeDatabase(nodes)


def nodes_to_csv_text(db: NodeDatabase) -> str:
    lines = ["id,x,y,yaw,height"]
    for n in db:
        lines.append(
            f"{n.id},{n.world_xy_m[0]:.9f},{n.world_xy_m[1]:.9f},"
            f"{n.yaw_rad:.9f},{n.floor_height_m:.9f}"
        )
    return "\n".join(lines) + "\n"


def load_node_db_csv(path) -> NodeDatabase:
    with open(path, "r", encoding="ascii") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or lines[0].replace(" ", "") != "id,x,y,yaw,height":
        raise NodeDatabaseError(f"{path}: expected header 'id,x,y,yaw,height'")
    return load_node_db(ln.split(",") for ln in lines[1:])


def save_node_db_csv(path, db: NodeDatabase) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write(nodes_to_csv_text(db))


def project_node_center(
    c_p, pose: RigidTransform, k: CameraIntrinsics, floor: FloorModel
) -> np.ndarray:
    """Back-project an undistorted pixel through the camera pose onto the
    floor plane; returns the floor point's (x, y)."""
    on_unit_plane = pixel_to_unit_plane(c_p, k)
    in_world = camera_to_world(on_unit_plane, pose)
    hit = intersect_floor(in_world, pose.translation, floor)
    return hit[:2]


def identify_node(
    floor_pt,
    db: NodeDatabase,
    max_dist_m: float = DEFAULT_MAX_IDENT_DIST_M,
    prior_age_s: float = 0.0,
    age_limit_s: float = DEFAULT_PRIOR_AGE_LIMIT_S,
):
    """Nearest database node within max_dist_m, or None. Also None when the
    last absolute detection is older than age_limit_s (stale prior)."""
    if prior_age_s > age_limit_s:
        return None
    hit = db.nearest(floor_pt)
    if hit is None:
        return None
    node, dist = hit
    if dist > max_dist_m:
        return None
    return node
