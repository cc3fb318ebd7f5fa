"""Synthetic data from the generative model, classification metrics,
cross-validation and feature-selection reports."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from .bound import sigmoid
from .data import MultiViewDataset, TargetMatrix, ViewMatrix, split_folds
from .errors import BaldurError, DegenerateLabels, SingleClassInput
from .predict import FittedModel, predict_proba

log = logging.getLogger(__name__)

METRIC_NAMES = ("accuracy", "balanced_accuracy", "precision", "recall", "f1", "auc")


# -- synthetic data ------------------------------------------------------------

@dataclass
class SynthConfig:
    """Forward-sampling parameters.

    ``label_mode`` is ``"bernoulli"`` (t ~ Bernoulli(sigmoid(y))) or
    ``"threshold"`` (t = 1 when y > 0), the latter for separable data.
    ``w_scale`` is the standard deviation of the nonzero weights. When
    ``logit_scale`` is set, each row of V is rescaled so the noiseless logit
    Z v_c^T has that standard deviation, which keeps label informativeness
    comparable across seeds; ``None`` keeps V ~ N(0, 1).
    """

    N: int = 200
    D: Sequence[int] = (20, 20)
    relevant: Sequence[int] = (5, 5)
    K_true: int = 2
    C: int = 1
    tau_true: float = 10.0
    psi_true: float = 10.0
    seed: int = 0
    label_mode: str = "bernoulli"
    w_scale: float = 1.0
    logit_scale: Optional[float] = None
    view_names: Optional[Sequence[str]] = None

    def __post_init__(self):
        self.D = [int(d) for d in self.D]
        self.relevant = [int(r) for r in self.relevant]
        if len(self.D) != len(self.relevant):
            raise ValueError("D and relevant must have one entry per view")
        if self.N < 1 or self.K_true < 1 or self.C < 1 or not self.D:
            raise ValueError("N, K_true, C and the number of views must be >= 1")
        for d, r in zip(self.D, self.relevant):
            if d < 1 or not 0 <= r <= d:
                raise ValueError(f"relevant count {r} must lie in [0, {d}]")
        if not (self.tau_true > 0 and self.psi_true > 0):
            raise ValueError("noise precisions must be positive")
        if self.label_mode not in ("bernoulli", "threshold"):
            raise ValueError("label_mode must be 'bernoulli' or 'threshold'")
        names = self.view_names or [f"view{m}" for m in range(len(self.D))]
        if len(names) != len(self.D):
            raise ValueError("one view name per view is required")
        self.view_names = [str(n) for n in names]

    @property
    def M(self) -> int:
        return len(self.D)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class GroundTruth:
    W: list                 # K_true x D_m per view
    relevant_masks: list    # boolean D_m per view
    V: np.ndarray           # C x K_true
    Z: np.ndarray
    Y: np.ndarray


def synth_generate(config: SynthConfig):
    """Sample a dataset from the model. Returns (MultiViewDataset, GroundTruth)."""
    rng = np.random.default_rng(config.seed)
    N, K = config.N, config.K_true
    views, Ws, masks = [], [], []
    Z = np.zeros((N, K))
    for name, D, r in zip(config.view_names, config.D, config.relevant):
        X = rng.normal(size=(N, D))
        rel = np.zeros(D, dtype=bool)
        rel[rng.choice(D, size=r, replace=False)] = True
        W = np.zeros((K, D))
        W[:, rel] = rng.normal(scale=config.w_scale, size=(K, r))
        Z += X @ W.T
        views.append(ViewMatrix(X, [f"{name}_f{d}" for d in range(D)], name))
        Ws.append(W)
        masks.append(rel)
    Z += rng.normal(scale=1.0 / np.sqrt(config.tau_true), size=(N, K))
    V = rng.normal(size=(config.C, K))
    if config.logit_scale is not None:
        spread = np.std(Z @ V.T, axis=0)
        V *= (config.logit_scale / np.where(spread > 0, spread, 1.0))[:, None]
    Y = Z @ V.T + rng.normal(scale=1.0 / np.sqrt(config.psi_true), size=(N, config.C))
    if config.label_mode == "threshold":
        T = (Y > 0).astype(float)
    else:
        T = (rng.random(size=Y.shape) < sigmoid(Y)).astype(float)
    for c in range(config.C):
        if T[:, c].min() == T[:, c].max():
            raise DegenerateLabels(
                f"seed {config.seed}: class column {c} has a single label; "
                "try another seed or a larger N"
            )
    targets = TargetMatrix(T, [f"class_{c}" for c in range(config.C)])
    return MultiViewDataset(views, targets), GroundTruth(Ws, masks, V, Z, Y)


# -- metrics -------------------------------------------------------------------

@dataclass
class MetricsReport:
    accuracy: float
    balanced_accuracy: Optional[float]
    precision: float
    recall: Optional[float]
    f1: float
    auc: Optional[float]
    percent_features_selected: Optional[float] = None

    def as_dict(self) -> dict:
        return asdict(self)


def confusion_counts(y_true, y_pred):
    y_true = np.asarray(y_true).astype(bool)
    y_pred = np.asarray(y_pred).astype(bool)
    tp = int(np.sum(y_true & y_pred))
    fp = int(np.sum(~y_true & y_pred))
    fn = int(np.sum(y_true & ~y_pred))
    tn = int(np.sum(~y_true & ~y_pred))
    return tp, fp, fn, tn


def auc_score(y_true, scores) -> float:
    """Mann-Whitney AUC with average ranks for ties."""
    y_true = np.asarray(y_true).astype(bool)
    n_pos = int(y_true.sum())
    n_neg = y_true.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClassInput("AUC needs both classes")
    ranks = rankdata(np.asarray(scores, dtype=float))
    return float((ranks[y_true].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def roc_points(y_true, scores):
    """(fpr, tpr) arrays of the empirical ROC curve, one point per distinct score."""
    y_true = np.asarray(y_true).astype(bool)
    scores = np.asarray(scores, dtype=float)
    n_pos = int(y_true.sum())
    n_neg = y_true.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClassInput("ROC needs both classes")
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], y_true[order]
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tps = np.cumsum(y)[last]
    fps = (last + 1) - tps
    return np.r_[0.0, fps / n_neg], np.r_[0.0, tps / n_pos]


def compute_metrics(y_true, y_prob, threshold: float = 0.5) -> MetricsReport:
    """Six classification metrics for one binary label column.

    When ``y_true`` holds a single class the AUC and balanced accuracy are
    undefined and reported as ``None``; recall is ``None`` with no positives.
    Precision with no predicted positives is 0.
    """
    y_true = np.asarray(y_true, dtype=float).ravel()
    y_prob = np.asarray(y_prob, dtype=float).ravel()
    if y_true.shape != y_prob.shape:
        raise ValueError("y_true and y_prob differ in length")
    if y_true.size == 0:
        raise ValueError("no samples")
    y_pred = y_prob >= threshold
    tp, fp, fn, tn = confusion_counts(y_true, y_pred)
    n = tp + fp + fn + tn
    accuracy = (tp + tn) / n
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else None
    specificity = tn / (tn + fp) if tn + fp else None
    rec = recall or 0.0
    f1 = 2 * precision * rec / (precision + rec) if precision + rec > 0 else 0.0
    if recall is None or specificity is None:
        balanced, auc = None, None
    else:
        balanced = 0.5 * (recall + specificity)
        auc = auc_score(y_true, y_prob)
    return MetricsReport(accuracy, balanced, precision, recall, f1, auc)


# -- feature selection ---------------------------------------------------------

def percent_features_selected(model: FittedModel, dataset: Optional[MultiViewDataset] = None) -> float:
    """Share of original features that survived pruning, in percent.

    The denominator counts every original feature of every view, pruned
    views included.
    """
    total = sum(model.n_original_features)
    if dataset is not None:
        total = sum(v.n_features for v in dataset.views)
    kept = sum(int(v.active.sum()) for v in model.views)
    return 100.0 * kept / total


def selected_masks(model: FittedModel) -> dict:
    """View name -> boolean mask over the original features (all False for pruned views)."""
    out = {}
    for name, d in zip(model.view_names, model.n_original_features):
        out[name] = np.zeros(d, dtype=bool)
    for v in model.views:
        out[v.name] = v.active.copy()
    return out


@dataclass
class FeatureEntry:
    view: str
    feature: str
    weights: np.ndarray     # |weight| per latent factor

    @property
    def total(self) -> float:
        return float(np.sum(self.weights))


def feature_report(model: FittedModel) -> dict:
    """Per surviving view, features ranked by total absolute weight.

    Primal views use |<W>|, dual views the implied |Xrv^T <A>|. Features
    whose weights are all exactly zero are left out, so an all-zero model
    gives empty lists.
    """
    report = {}
    for v in model.views:
        W = np.abs(v.implied_weights())  # K x D_active
        names = [n for n, a in zip(v.feature_names, v.active) if a]
        totals = W.sum(axis=0)
        order = sorted(range(len(names)), key=lambda d: (-totals[d], d))
        report[v.name] = [
            FeatureEntry(v.name, names[d], W[:, d].copy()) for d in order if totals[d] > 0
        ]
    return report


def write_feature_report(report: dict, path):
    width = max((e.weights.size for rows in report.values() for e in rows), default=0)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(["view", "rank", "feature", "total"] + [f"factor_{k}" for k in range(width)]) + "\n")
        for view, rows in report.items():
            for rank, e in enumerate(rows, start=1):
                vals = [repr(float(w)) for w in e.weights]
                fh.write(",".join([view, str(rank), e.feature, repr(e.total)] + vals) + "\n")


def selection_f1(selected, truth) -> float:
    """F1 of a selected-feature mask against a ground-truth mask."""
    selected = np.asarray(selected, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    tp = int(np.sum(selected & truth))
    if tp == 0:
        return 0.0
    precision = tp / selected.sum()
    recall = tp / truth.sum()
    return float(2 * precision * recall / (precision + recall))


# -- cross-validation ----------------------------------------------------------

class FoldError(BaldurError):
    """A fit failure inside cross-validation, tagged with its fold."""

    def __init__(self, fold, cause):
        super().__init__(f"fold {fold}: {cause}")
        self.fold = fold
        self.cause = cause


@dataclass
class CVResult:
    folds: list                       # list of (train, test) index arrays
    reports: list                     # one MetricsReport per fold
    mean: dict = field(default_factory=dict)
    std: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    def records(self) -> list:
        rows = [dict(fold=i, **r.as_dict()) for i, r in enumerate(self.reports)]
        rows.append({"fold": "mean", **self.mean})
        rows.append({"fold": "std", **self.std})
        return rows


def aggregate(reports) -> tuple:
    """Mean and sample (n-1) standard deviation of every metric, skipping undefined values."""
    mean, std = {}, {}
    for name in METRIC_NAMES + ("percent_features_selected",):
        vals = [getattr(r, name) for r in reports if getattr(r, name) is not None]
        mean[name] = float(np.mean(vals)) if vals else None
        std[name] = float(np.std(vals, ddof=1)) if len(vals) > 1 else (0.0 if vals else None)
    return mean, std


def cross_validate(dataset: MultiViewDataset, config=None, n_folds: int = 5, seed: int = 0,
                   threshold: float = 0.5, class_index: int = 0, folds=None) -> CVResult:
    """Outer-loop cross-validation; every fold refits standardizers on its train split."""
    from .inference import FitConfig, fit

    config = FitConfig() if config is None else config
    folds = split_folds(dataset, n_folds, seed=seed) if folds is None else folds
    reports, notes = [], []
    for i, (train, test) in enumerate(folds):
        try:
            model, _ = fit(dataset.subset(train), config)
        except BaldurError as exc:
            raise FoldError(i, exc) from exc
        notes.extend({"fold": i, **w} for w in model.warnings)
        test_set = dataset.subset(test)
        prob = predict_proba(model, test_set)[:, class_index]
        rep = compute_metrics(test_set.targets.values[:, class_index], prob, threshold)
        rep.percent_features_selected = percent_features_selected(model, dataset)
        reports.append(rep)
        log.info("fold %d: auc=%s acc=%.3f", i, rep.auc, rep.accuracy)
    mean, std = aggregate(reports)
    return CVResult(folds, reports, mean, std, notes)
