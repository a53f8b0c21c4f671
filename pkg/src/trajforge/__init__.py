"""trajforge: controllable synthetic mobility trajectory generation and evaluation."""

from .core import (
    Constraint,
    ConstraintSet,
    GridSpec,
    TimeSpec,
    Trajectory,
    TrajectoryDataset,
    Visit,
)

__version__ = "0.1.0"

__all__ = [
    "Constraint",
    "ConstraintSet",
    "GridSpec",
    "TimeSpec",
    "Trajectory",
    "TrajectoryDataset",
    "Visit",
    "__version__",
]
