"""Context-conditioned vehicle motion diffusion with a drivability guarantee.

Pipeline: a VQ-VAE discretizes observed highway scenarios into codebook
contexts; a classifier-free guided DDPM generates yaw-rate/acceleration
sequences for a context; a non-holonomic vehicle motion model integrates them
into trajectories; latent-space Mahalanobis uncertainty modulates the
guidance scale.
"""

from . import diffusion, evaluation, kinematics, pipeline, scenario, uncertainty, vqvae
from .errors import (
    ConfigError,
    CvmdError,
    DataError,
    InputError,
    SchemaError,
    TrainingError,
)

__all__ = [
    "diffusion",
    "evaluation",
    "kinematics",
    "pipeline",
    "scenario",
    "uncertainty",
    "vqvae",
    "CvmdError",
    "SchemaError",
    "DataError",
    "ConfigError",
    "InputError",
    "TrainingError",
]

__version__ = "0.1.0"
