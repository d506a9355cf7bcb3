"""Raw-to-sRGB dual-domain denoising toolkit.

Physically modeled sensor noise, a differentiable rendering chain built on
a small tape autodiff engine, denoisers on both sides of that chain, and
the training/evaluation machinery to compare them reproducibly.
"""

from . import autodiff, config, dataio, isp, metrics, nets, rawnoise, training
from .errors import (BoundsError, DimensionError, DomainError, EvaluationError,
                     FormatError, LayoutError, ParameterError, ToolkitError,
                     TrainingDiverged)

__version__ = "0.1.0"

__all__ = [
    "autodiff", "config", "dataio", "isp", "metrics", "nets", "rawnoise",
    "training", "ToolkitError", "DimensionError", "DomainError",
    "ParameterError", "LayoutError", "BoundsError", "FormatError",
    "EvaluationError", "TrainingDiverged", "__version__",
]
