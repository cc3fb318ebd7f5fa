"""Approximate posterior predictive classification for fitted models."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .bound import sigmoid
from .data import Standardizer, as_view_list
from .errors import FeatureCountMismatch, ViewMissing


@dataclass
class FittedView:
    """Frozen posterior of one retained view.

    Primal views carry ``weights`` (K x D_active); dual views carry the
    relevance-vector coefficients ``A`` (Nrv x K) with the standardized
    relevance vectors ``Xrv`` (Nrv x D_active).
    """

    name: str
    s_flag: bool
    standardizer: Standardizer
    active: np.ndarray
    feature_names: list
    weights: Optional[np.ndarray] = None
    A: Optional[np.ndarray] = None
    Xrv: Optional[np.ndarray] = None
    rv_indices: Optional[np.ndarray] = None
    cov: Optional[np.ndarray] = None

    @property
    def n_original(self) -> int:
        return self.active.shape[0]

    def implied_weights(self) -> np.ndarray:
        if self.s_flag:
            return (self.Xrv.T @ self.A).T
        return self.weights

    def project(self, x_raw) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x_raw, dtype=float))
        if x.shape[1] != self.n_original:
            raise FeatureCountMismatch(
                f"view {self.name!r}: expected {self.n_original} features, got {x.shape[1]}"
            )
        xs = self.standardizer.transform(x)[:, self.active]
        if self.s_flag:
            return (xs @ self.Xrv.T) @ self.A
        return xs @ self.weights.T


@dataclass
class FittedModel:
    views: list
    view_names: list
    n_original_features: list
    V_mean: np.ndarray
    V_cov: np.ndarray
    tau_mean: float
    psi_mean: float
    class_names: list
    converged: bool = True
    warnings: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    trace_summary: dict = field(default_factory=dict)

    @property
    def K(self) -> int:
        return self.V_mean.shape[1]

    @property
    def removed_views(self) -> list:
        kept = {v.name for v in self.views}
        return [n for n in self.view_names if n not in kept]


@dataclass
class Prediction:
    probabilities: np.ndarray
    regression_mean: np.ndarray
    regression_var: np.ndarray


def project_new(model: FittedModel, x_star) -> np.ndarray:
    """Latent projection sum_m H(m) of new samples, N* x K.

    ``x_star`` maps view names to raw (unstandardized) matrices with the
    original column count; a list is matched to the model's view order.
    Views pruned during training may be absent.
    """
    data = as_view_list(x_star, model.view_names)
    out = None
    for v in model.views:
        if v.name not in data:
            raise ViewMissing(f"input lacks view {v.name!r} required by the model")
        h = v.project(data[v.name])
        out = h if out is None else out + h
    if out is None:
        n = len(next(iter(data.values()))) if data else 0
        out = np.zeros((n, model.K))
    return out


def predictive_regression(model: FittedModel, x_star):
    """Mean and variance of the regression output y* for each class column.

    The latent projection goes through the output head V, and the
    variance is 1/<psi> + |<v_c>|^2 / <tau>, the same for every sample.
    """
    proj = project_new(model, x_star)
    mean = proj @ model.V_mean.T
    var_c = 1.0 / model.psi_mean + np.sum(model.V_mean**2, axis=1) / model.tau_mean
    var = np.broadcast_to(var_c, mean.shape).copy()
    return mean, var


def moderated_sigmoid(mean, var):
    return sigmoid(np.asarray(mean) / np.sqrt(1.0 + np.pi * np.asarray(var) / 8.0))


def predict_proba(model: FittedModel, x_star) -> np.ndarray:
    mean, var = predictive_regression(model, x_star)
    return moderated_sigmoid(mean, var)


def predict(model: FittedModel, x_star) -> Prediction:
    mean, var = predictive_regression(model, x_star)
    return Prediction(moderated_sigmoid(mean, var), mean, var)


def predict_label(probabilities, threshold: float = 0.5) -> np.ndarray:
    """Threshold probabilities; a probability equal to the threshold is labelled 1."""
    return (np.asarray(probabilities) >= threshold).astype(int)
