"""Concurrent multi-versioned (a,b)-tree map with wait-free atomic range scans."""

from .baseline import GlobalLockSortedMap
from .tree import ABTreeMap

__version__ = "0.1.0"

__all__ = ["ABTreeMap", "GlobalLockSortedMap", "__version__"]
