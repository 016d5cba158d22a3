"""Intrinsic calibration of event cameras from circle-grid event streams."""

__version__ = "0.1.0"

from .camera import Intrinsics, InverseRadialCamera, normalize, project  # noqa: E402
from .config import CalibrationConfig  # noqa: E402
from .events import EventStream, load_events, save_events  # noqa: E402
from .pattern import PatternSpec  # noqa: E402

__all__ = [
    "CalibrationConfig",
    "EventStream",
    "Intrinsics",
    "InverseRadialCamera",
    "PatternSpec",
    "load_events",
    "normalize",
    "project",
    "save_events",
    "__version__",
]
