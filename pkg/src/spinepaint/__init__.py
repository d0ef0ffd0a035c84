"""Gaussian-weighted per-voxel noise scheduling for diffusion inpainting."""

__version__ = "0.1.0"

from .geometry import (  # noqa: F401
    LEVELS,
    PATHOLOGIES,
    SEVERITIES,
    BinaryMask,
    Landmark,
    VolumeGrid,
    WeightField,
    gaussian_weight_field,
    resample_weights,
    threshold_mask,
)
from .schedule import (  # noqa: F401
    NoiseSchedule,
    TimestepField,
    build_schedule,
    q_sample_weighted,
    voxel_timesteps,
)
