"""Toy text-to-image diffusion with low-rank concept residuals and
attention-localized sampling, on a float64 numpy autodiff core."""

from .diffusion import ConfigurationError, UNetConfig, init_unet, make_schedule, unet_forward
from .residuals import PersonalizeConfig, ResidualSet, personalize, rank_for
from .sampler import SampleRequest, sample
from .tensor import Tensor, grad_check
from .text import default_vocab, tokenize

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError", "PersonalizeConfig", "ResidualSet", "SampleRequest", "Tensor", "UNetConfig",
    "default_vocab", "grad_check", "init_unet", "make_schedule", "personalize", "rank_for", "sample",
    "tokenize", "unet_forward",
]
