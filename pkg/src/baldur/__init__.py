"""Multi-view sparse Bayesian logistic classification with variational inference."""

from .data import MultiViewDataset, TargetMatrix, ViewMatrix, load_dataset, save_dataset
from .errors import BaldurError, InputError, NumericalError
from .evaluation import SynthConfig, compute_metrics, cross_validate, feature_report, synth_generate
from .inference import FitConfig, PruneConfig, fit
from .persistence import load_model, save_model
from .predict import FittedModel, predict, predict_label, predict_proba

__version__ = "0.1.0"

__all__ = [
    "BaldurError",
    "FitConfig",
    "FittedModel",
    "InputError",
    "MultiViewDataset",
    "NumericalError",
    "PruneConfig",
    "SynthConfig",
    "TargetMatrix",
    "ViewMatrix",
    "compute_metrics",
    "cross_validate",
    "feature_report",
    "fit",
    "load_dataset",
    "load_model",
    "predict",
    "predict_label",
    "predict_proba",
    "save_dataset",
    "save_model",
    "synth_generate",
]
