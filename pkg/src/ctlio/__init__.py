"""Continuous-time LiDAR-inertial odometry on non-uniform B-spline trajectories."""

__version__ = "0.1.0"
