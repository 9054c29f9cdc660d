"""Continuous PTZ camera calibration and world-plane multi-target tracking."""

__version__ = "0.1.0"
