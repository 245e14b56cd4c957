"""Replay-free multi-label class-incremental learning with class-specific positive and negative prompts."""

from .errors import (
    ConfigError,
    DDPError,
    FormatError,
    NumericError,
    ProtocolError,
    ScheduleError,
    ShapeError,
    UsageError,
)
from .kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DDPError",
    "FormatError",
    "KERNEL_BACKEND",
    "NumericError",
    "ProtocolError",
    "ScheduleError",
    "ShapeError",
    "UsageError",
    "__version__",
]
