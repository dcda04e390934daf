"""Gaussian process adapters for irregularly sampled time series.

An adapter maps an irregular series to the GP posterior at a fixed grid of
reference times, either as the posterior mean or as reparameterized posterior
samples, and pulls classifier gradients back to the GP hyperparameters.
Exact (Cholesky) and scalable (structured kernel interpolation + Lanczos)
backends are provided.
"""

from .adapter import AdapterConfig, AdapterOutput, adapt_backward, adapt_forward
from .errors import (
    GPAdapterError,
    InvalidArgumentError,
    InvalidStateError,
    NumericBreakdownError,
    TrainingFailureError,
    UnsupportedModeError,
)
from .exact_gp import ExactPosterior, GaussianRepr, TimeSeries, exact_posterior, exact_sample
from .kernel import SE, GpParams, se_kernel
from .training import Artifacts, ClassifierSpec, Dataset, TrainConfig, evaluate, predict, train

__version__ = "0.1.0"

__all__ = [
    "AdapterConfig",
    "AdapterOutput",
    "adapt_backward",
    "adapt_forward",
    "GPAdapterError",
    "InvalidArgumentError",
    "InvalidStateError",
    "NumericBreakdownError",
    "TrainingFailureError",
    "UnsupportedModeError",
    "ExactPosterior",
    "GaussianRepr",
    "TimeSeries",
    "exact_posterior",
    "exact_sample",
    "SE",
    "GpParams",
    "se_kernel",
    "Artifacts",
    "ClassifierSpec",
    "Dataset",
    "TrainConfig",
    "evaluate",
    "predict",
    "train",
]
