"""Gaussian-splatting reconstruction from event-camera streams."""

import os

import numba

# The TBB layer shipped with some numba builds warns about version mismatches;
# the workqueue layer is always available and deterministic enough for tiles.
if "NUMBA_THREADING_LAYER" not in os.environ:
    numba.config.THREADING_LAYER = "workqueue"

from .errors import ContractError, EvsplatError, InvalidParameterError, NumericError  # noqa: E402
from .scene import CameraModel, GaussianCloud, SE3Pose  # noqa: E402

__version__ = "0.1.0"

__all__ = [
    "CameraModel",
    "ContractError",
    "EvsplatError",
    "GaussianCloud",
    "InvalidParameterError",
    "NumericError",
    "SE3Pose",
]
