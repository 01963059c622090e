import numpy as np
import pytest

from nodeloc.floorid import GroundNode, NodeDatabase
from nodeloc.geometry import CameraIntrinsics, RigidTransform
from nodeloc.simulator import (
    DOWNWARD,
    RenderSettings,
    Scene,
    aisle_scene,
    render_frame,
    render_reference_image,
)


@pytest.fixture(scope="session")
def cam():
    """Default lens: 600 px focal length at 640x480 with mild distortion."""
    return CameraIntrinsics(
        600.0, 600.0, 320.0, 240.0, (-0.05, 0.0, 0.0), (0.0, 0.0), 640, 480
    )


@pytest.fixture(scope="session")
def cam_clean():
    return CameraIntrinsics(600.0, 600.0, 320.0, 240.0, (0.0, 0.0, 0.0), (0.0, 0.0), 640, 480)


@pytest.fixture(scope="session")
def one_node_scene():
    return Scene(nodes=NodeDatabase([GroundNode(0, np.array([0.0, 0.0]), 0.0)]))


def overhead_pose(x=0.0, y=0.0, height=1.0):
    return RigidTransform(DOWNWARD, np.array([x, y, height]))


@pytest.fixture(scope="session")
def node_patch(one_node_scene, cam_clean):
    """Clean frontal render of a full node, cropped (session-cached)."""
    return render_reference_image(one_node_scene, cam_clean, height_m=1.0)


@pytest.fixture(scope="session")
def frontal_frame(one_node_scene, cam_clean):
    """Noise-free full frame with the node centered, 1 m overhead."""
    return render_frame(
        one_node_scene,
        overhead_pose(),
        cam_clean,
        RenderSettings(motion_blur=0.0, noise_sigma=0.0),
    )


# a scene with larger codes (5 cm cells on a 12 cm pitch) where the identity
# codes resolve at 1 m with the default lens; used by decode-path tests
@pytest.fixture(scope="session")
def decodable_scene():
    from nodeloc.gridpose import NodeGeometry

    nodes = NodeDatabase(
        [GroundNode(7, np.array([0.0, 0.0]), 0.0), GroundNode(9, np.array([1.5, 0.0]), 0.4)]
    )
    return Scene(
        nodes=nodes,
        geometry=NodeGeometry(pitch_m=0.12, code_size_m=0.05),
        blob_radius_m=0.04,
        marker_radius_m=0.04,
        node_disc_radius_m=0.24,
    )


def render_clean(scene, pose, k, lux=300.0):
    return render_frame(
        scene, pose, k, RenderSettings(illumination_lux=lux, motion_blur=0.0, noise_sigma=0.0)
    )
