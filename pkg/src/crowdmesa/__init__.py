"""Crowd counting by MESA-learned density, optical flow, geo-referencing and pressure maps."""

__version__ = "0.1.0"
