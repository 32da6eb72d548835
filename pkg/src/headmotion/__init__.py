"""Head-pose / gaze sequence synthesis with a sequence VAE and latent diffusion."""

from headmotion.core import (
    CHANNELS,
    ConditionBundle,
    NormStats,
    PoseSequence,
    compute_norm_stats,
    denormalize,
    normalize,
)

__version__ = "0.1.0"

__all__ = [
    "CHANNELS",
    "ConditionBundle",
    "NormStats",
    "PoseSequence",
    "compute_norm_stats",
    "denormalize",
    "normalize",
]
