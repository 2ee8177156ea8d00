"""Cascaded contextual region-based detector for 1D seismic event picking."""

from .evaluate import Detection, EvalReport, Interval, ap_range, iou_1d, nms
from .model import Detector, ModelConfig, desk_preset, full_preset

__all__ = [
    "Detection", "Detector", "EvalReport", "Interval", "ModelConfig",
    "ap_range", "desk_preset", "full_preset", "iou_1d", "nms",
]

__version__ = "0.1.0"
