"""Multi-instance rigid object detection and 6-DOF pose estimation from RGB-D images."""

__version__ = "0.1.0"
