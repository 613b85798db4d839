"""Single-step residual diffusion super-resolution with quality-aware prompts and
uncertainty-guided noise injection, at desk scale."""

from .config import RunConfig, load_config
from .errors import (CheckpointError, ConfigError, DataError, ImageFormatError, ImageIOError, ProtocolError,
                     QUSRError, RemoteError, ShapeError, TrainingError)

__version__ = "0.1.0"

__all__ = [
    "RunConfig", "load_config",
    "QUSRError", "ConfigError", "DataError", "ShapeError", "ImageIOError", "ImageFormatError",
    "RemoteError", "ProtocolError", "TrainingError", "CheckpointError",
    "__version__",
]
