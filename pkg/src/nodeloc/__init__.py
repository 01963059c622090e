"""nodeloc: ground-node visual localization with a synthetic warehouse
simulator.

Submodules: geometry (camera model, transforms, floor intersection),
imaging (focus measure, morphology, double-kernel correlation), detector
(corner features, matching, clustering, ROI), nodecode (identity codes),
gridpose (blob grid, PnP, four-pose candidates), floorid (back-projection
identification), simulator (rendering, trajectories, datasets), pipeline
(frame orchestration and metrics) and cli.

Set NODELOC_NUMBA=0 to run the pure-numpy kernel fallbacks.
"""

from ._accel import USE_NUMBA, backend_name

__version__ = "0.1.0"

__all__ = ["USE_NUMBA", "backend_name", "__version__"]
