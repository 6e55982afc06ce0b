"""Multi-camera single-object tracking toolkit.

Calibrated pinhole geometry, feature-volume lifting onto a bird's-eye-view
plane, center-heatmap tracking heads with their losses, a late-fusion
baseline, the full evaluation protocol, and a deterministic synthetic
multi-camera simulator that provides ground truth for all of it.
"""

from crossview.boxes import BBox2D, CropTransform
from crossview.camera import BevGridSpec, CameraModel, PixelPoint, VolumeSpec
from crossview.errors import ContractError, GeometryError, ParseError, ToolkitError
from crossview.pipeline import Tracker, TrackerConfig
from crossview.trackhead import LossWeights

__version__ = "0.1.0"

__all__ = [
    "BBox2D", "BevGridSpec", "CameraModel", "ContractError", "CropTransform",
    "GeometryError", "LossWeights", "ParseError", "PixelPoint", "ToolkitError",
    "Tracker", "TrackerConfig", "VolumeSpec", "__version__",
]
