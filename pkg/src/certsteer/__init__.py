"""Certified perception feeding an L1 adaptive lane-keeping controller."""

__version__ = "0.1.0"
