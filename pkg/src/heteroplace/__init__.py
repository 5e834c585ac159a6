"""Radar-to-lidar place recognition with shared rotation-invariant signatures."""

__version__ = "0.1.0"
