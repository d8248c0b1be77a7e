"""Environment-aware NDT map building and evaluation."""

from eandt._kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
