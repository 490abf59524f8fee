"""Skeletal probability fields: extraction, rigging and evaluation of 3D shapes."""

from .config import PipelineConfig
from .fields import Skeleton
from .geometry import Mesh, OccupancyGrid
from .pipeline import evaluate, run_pipeline
from .rig import Pose, RigModel

__version__ = "0.1.0"

__all__ = ["Mesh", "OccupancyGrid", "PipelineConfig", "Pose", "RigModel", "Skeleton", "evaluate", "run_pipeline"]
