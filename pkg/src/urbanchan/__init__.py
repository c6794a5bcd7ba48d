"""Urban MIMO channel post-processing and frequency-continuous LSP modeling."""

from .errors import DegenerateFitError, EstimationError, InputError, InsufficientAnchorsError

__version__ = "0.1.0"

__all__ = [
    "DegenerateFitError",
    "EstimationError",
    "InputError",
    "InsufficientAnchorsError",
    "__version__",
]
