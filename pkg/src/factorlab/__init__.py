"""Latent factor models for daily asset-return panels, fitted by
variational inference and scored by importance-sampled marginal
log-likelihood."""

from .models import FAMILIES, ModelSpec, spec_from_name  # noqa: F401
from .inference import TrainingConfig, fit  # noqa: F401
from .evaluation import evaluate_split, factor_path, mll_importance  # noqa: F401
from .data import ReturnPanel, SplitSpec, load_panel, make_fixture, moments  # noqa: F401

__version__ = "0.1.0"
