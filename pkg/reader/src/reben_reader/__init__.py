"""Training-side reader for patch tensor stores."""

__version__ = "0.1.0"

from .view import DatasetView, get, open

__all__ = ["__version__", "DatasetView", "get", "open"]
