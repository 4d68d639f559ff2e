"""Generative recursive reasoning models at desk scale.

A compact recurrent network refines a latent state through stochastic
transitions trained by amortized variational inference, supporting
conditional constraint solving, unconditional generation, and
inference-time scaling in depth (more recursion) and width (parallel
trajectory sampling), together with exhaustive task oracles for scoring.
"""

__version__ = "0.1.0"

from gram.errors import ConfigError, DataError, GramError, InvalidCheckError, NumericError
from gram.model import GramModel, LatentState, ModelConfig, TransitionRecord

__all__ = [
    "GramModel", "LatentState", "ModelConfig", "TransitionRecord",
    "GramError", "ConfigError", "DataError", "NumericError", "InvalidCheckError",
    "__version__",
]
