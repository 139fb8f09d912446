"""Edge-based RGBD visual odometry with submodular edge selection."""

from .geometry import CameraIntrinsics, Pose
from .image_pipeline import (
    DistanceField,
    DistanceFieldPyramid,
    EdgeMap,
    build_pyramid,
    canny_detect,
    distance_transform,
    field_lookup,
)
from .tracking import (
    EdgeSet,
    TrackingConfig,
    TrackingResult,
    preprocess_frame,
    track_frame,
)
from .selection import SelectionConfig, select_edges, stochastic_partition_greedy
from .mapping import Keyframe, SlidingWindow, schur_marginalize, window_optimize
from .evaluation import AteReport, compute_ate, timing_summary
from .pipeline import OdometrySystem, run_sequence
from .config import RunConfig, load_config

__version__ = "0.1.0"

__all__ = [
    "AteReport",
    "CameraIntrinsics",
    "DistanceField",
    "DistanceFieldPyramid",
    "EdgeMap",
    "EdgeSet",
    "Keyframe",
    "OdometrySystem",
    "Pose",
    "RunConfig",
    "SelectionConfig",
    "SlidingWindow",
    "TrackingConfig",
    "TrackingResult",
    "build_pyramid",
    "canny_detect",
    "compute_ate",
    "distance_transform",
    "field_lookup",
    "load_config",
    "preprocess_frame",
    "run_sequence",
    "schur_marginalize",
    "select_edges",
    "stochastic_partition_greedy",
    "timing_summary",
    "track_frame",
    "window_optimize",
]
