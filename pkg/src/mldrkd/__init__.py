"""Multi-level decoupled relational distillation at desk scale.

Layers: a float64 tape-based autodiff core (autodiff, backend), the
distillation losses (losses, fusion), toy stage-structured models
(models), synthetic data (data), the training loop (train), and a
config-driven CLI (config, cli).
"""

__version__ = "0.1.0"

from .autodiff import Tape, Tensor, backward
from .errors import (
    ConfigError,
    ContractError,
    DataError,
    FormatError,
    ShapeError,
    TrainingAborted,
)

__all__ = [
    "Tape",
    "Tensor",
    "backward",
    "ConfigError",
    "ContractError",
    "DataError",
    "FormatError",
    "ShapeError",
    "TrainingAborted",
    "__version__",
]
