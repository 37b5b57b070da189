"""Desk-scale self-supervised depth and visual odometry toolkit."""

__version__ = "0.1.0"
