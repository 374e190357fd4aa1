"""CT image-quality bench testing for low-dose denoisers."""

__version__ = "0.1.0"

from .core import DataError, DisplayWindow, Image, NumericalError, Roi
from .kernels import BACKEND

__all__ = ["BACKEND", "DataError", "DisplayWindow", "Image", "NumericalError", "Roi", "__version__"]
