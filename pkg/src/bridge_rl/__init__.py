"""Offline-to-online preference-based RL on finite tabular MDPs."""

from ._kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
