"""Bidirectional stereo visual odometry with geodesic rotation fusion."""

__version__ = "0.1.0"
