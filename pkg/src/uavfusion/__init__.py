"""Desk-scale indoor UAV simulator with a sensor-fusion SLAM stack."""

__version__ = "0.1.0"
