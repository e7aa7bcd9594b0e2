"""Trace-driven simulator for low-latency FoV-adaptive 360-degree video streaming."""

from .geometry import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
