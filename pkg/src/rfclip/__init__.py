"""Training-free attention refocusing for dense prediction with CLIP vision towers."""

from .config import ModelConfig, RunConfig
from .errors import ConfigError, DataError, NumericError, RFClipError
from .pipeline import EvalReport, Segmenter, evaluate, segment_image, sweep

__version__ = "0.1.0"

__all__ = [
    "ModelConfig", "RunConfig",
    "RFClipError", "ConfigError", "DataError", "NumericError",
    "EvalReport", "Segmenter", "evaluate", "segment_image", "sweep",
]
