"""Semi-supervised DCGAN with a K+1-class discriminator, on a numpy autodiff core."""
from . import kernels
from .errors import (
    CheckpointError, ConfigError, DataError, DomainError, ShapeError, SSGANError, TrainingError,
)
from .tensor import RandomSource, Tape, Tensor, grad_check, sample_gaussian

__version__ = "0.1.0"
KERNEL_BACKEND = kernels.BACKEND

__all__ = [
    "CheckpointError", "ConfigError", "DataError", "DomainError", "ShapeError", "SSGANError",
    "TrainingError", "RandomSource", "Tape", "Tensor", "grad_check", "sample_gaussian",
    "KERNEL_BACKEND",
]
