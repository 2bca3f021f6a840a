"""Angle wrapping helpers shared by the wind, filter, and routing modules."""

import numpy as np

TWO_PI = 2.0 * np.pi


def wrap_to_2pi(angle):
    """Reduce an angle (scalar or array) to [0, 2*pi)."""
    return np.mod(angle, TWO_PI)


def wrap_to_pm_pi(angle):
    """Reduce an angle (scalar or array) to [-pi, pi)."""
    return np.mod(np.asarray(angle) + np.pi, TWO_PI) - np.pi
