"""Distance-aware worst-case error bounds for MLP + spline networks."""

__version__ = "0.1.0"
