"""GAN-based semi- and weakly-supervised semantic segmentation on a numpy autodiff core."""

from .losses import LossWeights
from .models import Discriminator, DiscriminatorConfig, Generator, GeneratorConfig
from .training import RunConfig, TrainConfig, Trainer, run_training

__version__ = "0.1.0"

__all__ = [
    "Discriminator",
    "DiscriminatorConfig",
    "Generator",
    "GeneratorConfig",
    "LossWeights",
    "RunConfig",
    "TrainConfig",
    "Trainer",
    "run_training",
]
