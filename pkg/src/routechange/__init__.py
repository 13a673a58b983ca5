"""Route-change detection from traceroute latency measurements.

The pipeline engineers per-trace, temporal, rolling and aggregate features,
stacks three boosted-tree learners through out-of-fold predictions under a
boosted meta-model, and calibrates an F1-maximising decision threshold.
"""
from __future__ import annotations

__version__ = "0.1.0"

from .errors import DataError, RouteChangeError

__all__ = ["DataError", "RouteChangeError", "__version__"]
