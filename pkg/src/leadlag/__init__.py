"""Multi-scale lead-lag graph forecasting for multivariate time series."""

__version__ = "0.1.0"

from .engine import DiffArray, Tape, backward, grad_check

__all__ = ["DiffArray", "Tape", "backward", "grad_check", "__version__"]
