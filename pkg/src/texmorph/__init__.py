"""Training-free textured voxel morphing on a seeded two-stage flow prior."""

__version__ = "0.1.0"

from .errors import ConfigError, DegenerateEndpointsError, DegenerateRowError, InvalidInputError, MorphError, StageError

__all__ = [
    "__version__",
    "ConfigError",
    "DegenerateEndpointsError",
    "DegenerateRowError",
    "InvalidInputError",
    "MorphError",
    "StageError",
]
