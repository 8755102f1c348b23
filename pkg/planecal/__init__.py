"""Multi-plane kinematic calibration of a 6-DOF industrial arm."""

__version__ = "0.1.0"
