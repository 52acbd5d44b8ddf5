"""Spatio-temporal 3D multi-object tracking: learned association with
transformer information flow, trained and evaluated on a synthetic simulator."""

__version__ = "0.1.0"
