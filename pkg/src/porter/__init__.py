"""Planar tray-porter robot lab: residual RL pipeline and benchmark harness."""

__version__ = "0.1.0"
