"""Recurrent gesture recognition: stacked GRU encoder, global attention, FC classifier."""

__version__ = "0.1.0"

from grurec.errors import (
    CheckpointError,
    ConfigError,
    DataError,
    DivergenceError,
    GrurecError,
    ShapeError,
)

__all__ = [
    "__version__",
    "CheckpointError",
    "ConfigError",
    "DataError",
    "DivergenceError",
    "GrurecError",
    "ShapeError",
]
