"""Score-based estimation of sensing and communication performance metrics."""

from .numerics import RngStream

__version__ = "0.1.0"

__all__ = ["RngStream", "__version__"]
