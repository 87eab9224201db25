"""Normalization lab for deep Transformers: Post-LN, Pre-LN, DeepNorm, BranchNorm."""

__version__ = "0.1.0"

from .kernels import BACKEND  # noqa: E402
from .model import ModelConfig, build_model, loss  # noqa: E402
from .strategies import NormStrategy, Schedule, branchnorm_alpha, deepnorm_coeffs  # noqa: E402
from .tensor import Tensor, backward, finite_diff, no_grad  # noqa: E402

__all__ = [
    "BACKEND",
    "ModelConfig",
    "NormStrategy",
    "Schedule",
    "Tensor",
    "backward",
    "branchnorm_alpha",
    "build_model",
    "deepnorm_coeffs",
    "finite_diff",
    "loss",
    "no_grad",
]
