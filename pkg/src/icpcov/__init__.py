"""Covariance estimation for 3D ICP registration."""

__version__ = "0.1.0"

from .geometry import RigidTransform, exp_map, log_map  # noqa: F401
