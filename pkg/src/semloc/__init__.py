"""Vehicle localization on a road map from odometry and semantic image cues."""

from .estimators import NoiseModelEstimator, SemanticLocalizer
from .evaluation import RunReport, gini_index, localization_time, run_ablation, run_filter
from .mixture_filter import FilterConfig, Posterior, init_uniform, step
from .observation import NoiseModel, ObservationFrame
from .road_map import RoadGraph, StreetSegment
from .solar import SunPosition, sun_position

__all__ = [
    "FilterConfig",
    "NoiseModel",
    "NoiseModelEstimator",
    "ObservationFrame",
    "Posterior",
    "RoadGraph",
    "RunReport",
    "SemanticLocalizer",
    "StreetSegment",
    "SunPosition",
    "gini_index",
    "init_uniform",
    "localization_time",
    "run_ablation",
    "run_filter",
    "step",
    "sun_position",
]

__version__ = "0.1.0"
