"""Multi-IMU, self-consistent online refinement of freehand scan trajectories."""

from .pose import PoseChain, RelPose

__all__ = ["PoseChain", "RelPose"]
__version__ = "0.1.0"
