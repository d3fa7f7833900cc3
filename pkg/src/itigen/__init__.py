"""Inclusive prompt-token learning, negative-prompt guidance and fairness metrics."""

from ._kernels import BACKEND as KERNEL_BACKEND
from .core import (AttributeSet, AttributeSpec, FairTokenTable, HardPhrase, ImageRecord,
                   InclusivePrompt, ReferenceSet, combination_from_index, combination_index,
                   enumerate_combinations, load_schema, save_schema)
from .encoders import Encoder, ToyEncoder, cache_reference_features, make_encoder
from .errors import (BackendUnavailable, IngestionError, ItiGenError, NumericError,
                     PreconditionError, SchemaError, ValidationError)
from .evaluation import (EmpiricalDistribution, GaussianStats, classify, empirical_distribution,
                         fid, fit_gaussian, kl_to_uniform, preference_tally)
from .generation import GenerationJob, StubBackend, generate, guided_step
from .training import TrainingConfig, loss_and_grad, total_loss, train

__version__ = "0.1.0"

__all__ = [
    "KERNEL_BACKEND",
    "AttributeSet",
    "AttributeSpec",
    "FairTokenTable",
    "HardPhrase",
    "ImageRecord",
    "InclusivePrompt",
    "ReferenceSet",
    "combination_from_index",
    "combination_index",
    "enumerate_combinations",
    "load_schema",
    "save_schema",
    "Encoder",
    "ToyEncoder",
    "cache_reference_features",
    "make_encoder",
    "BackendUnavailable",
    "IngestionError",
    "ItiGenError",
    "NumericError",
    "PreconditionError",
    "SchemaError",
    "ValidationError",
    "EmpiricalDistribution",
    "GaussianStats",
    "classify",
    "empirical_distribution",
    "fid",
    "fit_gaussian",
    "kl_to_uniform",
    "preference_tally",
    "GenerationJob",
    "StubBackend",
    "generate",
    "guided_step",
    "TrainingConfig",
    "loss_and_grad",
    "total_loss",
    "train",
]
