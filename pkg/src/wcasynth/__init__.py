"""Geometry-controlled diffusion on synthetic map tiles, built on a small numpy autodiff core."""
from .errors import CheckpointError, ConfigError, NumericalError, ShapeError, WCAError

__version__ = "0.1.0"

__all__ = ["CheckpointError", "ConfigError", "NumericalError", "ShapeError", "WCAError", "__version__"]
