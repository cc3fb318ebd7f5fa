"""Multi-view datasets: loading, validation, standardization and partitioning."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .errors import (
    InputError,
    InsufficientClassMembers,
    KTooLarge,
    MissingFile,
    NonBinaryTarget,
    NonFiniteValue,
    ShapeMismatch,
)

RV_STRATEGIES = ("all", "random-k")


@dataclass
class ViewMatrix:
    """One feature block of a dataset, N rows by D columns.

    ``force_dual``, ``rv_strategy`` and ``rv_k`` carry per-view overrides read
    from a manifest; ``None`` means "use the fit configuration".
    """

    values: np.ndarray
    feature_names: list
    view_name: str
    force_dual: Optional[bool] = None
    rv_strategy: Optional[str] = None
    rv_k: Optional[int] = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2:
            raise ShapeMismatch(f"view {self.view_name!r} must be a 2-D matrix")
        if self.values.shape[1] < 1:
            raise ShapeMismatch(f"view {self.view_name!r} has no features")
        if not np.all(np.isfinite(self.values)):
            raise NonFiniteValue(f"view {self.view_name!r} contains NaN or Inf")
        if self.feature_names is None:
            self.feature_names = [f"{self.view_name}_{d}" for d in range(self.n_features)]
        self.feature_names = [str(f) for f in self.feature_names]
        if len(self.feature_names) != self.n_features:
            raise ShapeMismatch(
                f"view {self.view_name!r}: {len(self.feature_names)} names for "
                f"{self.n_features} columns"
            )

    @property
    def n_samples(self) -> int:
        return self.values.shape[0]

    @property
    def n_features(self) -> int:
        return self.values.shape[1]

    def take(self, rows) -> "ViewMatrix":
        return replace(self, values=self.values[np.asarray(rows, dtype=int)])


@dataclass
class TargetMatrix:
    """Binary N x C label matrix."""

    values: np.ndarray
    class_names: Optional[list] = None

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim == 1:
            vals = vals[:, None]
        if vals.ndim != 2:
            raise ShapeMismatch("targets must be a vector or a 2-D matrix")
        if not np.all(np.isfinite(vals)):
            raise NonFiniteValue("targets contain NaN or Inf")
        if not np.all((vals == 0) | (vals == 1)):
            bad = vals[(vals != 0) & (vals != 1)][0]
            raise NonBinaryTarget(f"targets must be 0/1, found {bad:g}")
        self.values = vals
        if self.class_names is None:
            self.class_names = [f"class_{c}" for c in range(vals.shape[1])]
        self.class_names = [str(c) for c in self.class_names]

    @property
    def n_samples(self) -> int:
        return self.values.shape[0]

    @property
    def n_classes(self) -> int:
        return self.values.shape[1]

    def take(self, rows) -> "TargetMatrix":
        return replace(self, values=self.values[np.asarray(rows, dtype=int)])


@dataclass
class Standardizer:
    """Per-column z-scoring parameters; ``active`` is False for constant columns."""

    mean: np.ndarray
    std: np.ndarray
    active: np.ndarray

    def transform(self, values: np.ndarray) -> np.ndarray:
        return (np.asarray(values, dtype=float) - self.mean) / self.std


@dataclass
class ViewDescriptor:
    s_flag: bool
    rv_indices: list
    standardizer: Standardizer
    active_features: np.ndarray

    def __post_init__(self):
        if bool(self.rv_indices) != bool(self.s_flag):
            raise ValueError("relevance vectors are required exactly for dual views")


@dataclass
class MultiViewDataset:
    views: list
    targets: TargetMatrix
    descriptors: Optional[list] = field(default=None)

    def __post_init__(self):
        if not self.views:
            raise ShapeMismatch("a dataset needs at least one view")
        n = self.targets.n_samples
        for v in self.views:
            if v.n_samples != n:
                raise ShapeMismatch(
                    f"view {v.view_name!r} has {v.n_samples} rows, targets have {n}"
                )
        names = [v.view_name for v in self.views]
        if len(set(names)) != len(names):
            raise InputError(f"duplicate view names: {names}")

    @property
    def n_samples(self) -> int:
        return self.targets.n_samples

    @property
    def n_views(self) -> int:
        return len(self.views)

    @property
    def n_classes(self) -> int:
        return self.targets.n_classes

    def subset(self, rows) -> "MultiViewDataset":
        return MultiViewDataset([v.take(rows) for v in self.views], self.targets.take(rows))


# -- loading -----------------------------------------------------------------

_MANIFEST_KEYS = {"views", "targets"}
_VIEW_KEYS = {"name", "path", "force_dual", "rv_strategy", "rv_k"}


def read_csv_matrix(path):
    """Read a headed numeric CSV. Returns (header, values)."""
    if not os.path.isfile(path):
        raise MissingFile(f"file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows:
        raise ShapeMismatch(f"{path}: empty file")
    header, body = rows[0], rows[1:]
    width = len(header)
    for i, r in enumerate(body, start=2):
        if len(r) != width:
            raise ShapeMismatch(f"{path}:{i}: expected {width} fields, got {len(r)}")
    try:
        values = np.array([[float(x) for x in r] for r in body], dtype=float)
    except ValueError as exc:
        raise InputError(f"{path}: non-numeric entry ({exc})") from None
    values = values.reshape(len(body), width)
    if not np.all(np.isfinite(values)):
        raise NonFiniteValue(f"{path}: contains NaN or Inf")
    return header, values


def write_csv_matrix(path, header, values, fmt=repr):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in np.asarray(values):
            w.writerow([fmt(float(x)) for x in row])


def load_dataset(manifest_path) -> MultiViewDataset:
    """Load a dataset from a JSON manifest.

    The manifest looks like::

        {"views": [{"name": "mri", "path": "mri.csv", "force_dual": false}],
         "targets": "targets.csv"}

    Relative paths are resolved against the manifest's directory.
    """
    manifest = read_manifest(manifest_path)
    base = os.path.dirname(os.path.abspath(manifest_path))
    views = []
    for entry in manifest["views"]:
        header, values = read_csv_matrix(os.path.join(base, entry["path"]))
        views.append(
            ViewMatrix(
                values,
                header,
                entry.get("name", os.path.splitext(os.path.basename(entry["path"]))[0]),
                force_dual=entry.get("force_dual"),
                rv_strategy=entry.get("rv_strategy"),
                rv_k=entry.get("rv_k"),
            )
        )
    if manifest.get("targets") is None:
        raise InputError(f"{manifest_path}: no targets entry")
    header, values = read_csv_matrix(os.path.join(base, manifest["targets"]))
    return MultiViewDataset(views, TargetMatrix(values, header))


def read_manifest(manifest_path) -> dict:
    if not os.path.isfile(manifest_path):
        raise MissingFile(f"manifest not found: {manifest_path}")
    try:
        with open(manifest_path, encoding="utf-8") as fh:
            manifest = json.load(fh)
    except json.JSONDecodeError as exc:
        raise InputError(f"{manifest_path}: invalid JSON ({exc})") from None
    if not isinstance(manifest, dict):
        raise InputError(f"{manifest_path}: manifest must be a JSON object")
    unknown = set(manifest) - _MANIFEST_KEYS
    if unknown:
        raise InputError(f"{manifest_path}: unknown keys {sorted(unknown)}")
    if not isinstance(manifest.get("views"), list) or not manifest["views"]:
        raise InputError(f"{manifest_path}: 'views' must be a non-empty list")
    for entry in manifest["views"]:
        if not isinstance(entry, dict) or "path" not in entry:
            raise InputError(f"{manifest_path}: every view needs a 'path'")
        unknown = set(entry) - _VIEW_KEYS
        if unknown:
            raise InputError(f"{manifest_path}: unknown view keys {sorted(unknown)}")
        if entry.get("force_dual") not in (None, True, False):
            raise InputError(f"{manifest_path}: force_dual must be true or false")
        if entry.get("rv_strategy") not in (None,) + RV_STRATEGIES:
            raise InputError(f"{manifest_path}: rv_strategy must be one of {RV_STRATEGIES}")
    return manifest


def load_views(manifest_path, require_targets=False):
    """Load only the views of a manifest (targets optional), for prediction."""
    manifest = read_manifest(manifest_path)
    base = os.path.dirname(os.path.abspath(manifest_path))
    views = {}
    for entry in manifest["views"]:
        header, values = read_csv_matrix(os.path.join(base, entry["path"]))
        name = entry.get("name", os.path.splitext(os.path.basename(entry["path"]))[0])
        views[name] = ViewMatrix(values, header, name)
    targets = None
    if manifest.get("targets") is not None:
        path = os.path.join(base, manifest["targets"])
        if require_targets or os.path.isfile(path):
            header, values = read_csv_matrix(path)
            targets = TargetMatrix(values, header)
    elif require_targets:
        raise InputError(f"{manifest_path}: no targets entry")
    return views, targets


def save_dataset(dataset: MultiViewDataset, directory, manifest_name="manifest.json"):
    """Write views and targets as CSVs plus a manifest; returns the manifest path."""
    os.makedirs(directory, exist_ok=True)
    entries = []
    for v in dataset.views:
        fname = f"{v.view_name}.csv"
        write_csv_matrix(os.path.join(directory, fname), v.feature_names, v.values)
        entry = {"name": v.view_name, "path": fname}
        if v.force_dual is not None:
            entry["force_dual"] = bool(v.force_dual)
        entries.append(entry)
    write_csv_matrix(
        os.path.join(directory, "targets.csv"),
        dataset.targets.class_names,
        dataset.targets.values,
        fmt=lambda x: str(int(x)),
    )
    path = os.path.join(directory, manifest_name)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"views": entries, "targets": "targets.csv"}, fh, indent=2)
        fh.write("\n")
    return path


# -- preprocessing -----------------------------------------------------------

def standardize_fit_transform(view: ViewMatrix, train_rows):
    """Z-score every column with train-row statistics.

    Columns with zero variance on the training rows are marked inactive; their
    std is stored as 1 so the transform stays finite.
    """
    train_rows = np.asarray(train_rows, dtype=int)
    if train_rows.size == 0:
        raise ValueError("train_rows must be nonempty")
    x = view.values[train_rows]
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    # relative test so float noise on a constant column is not mistaken for signal
    active = std > 1e-12 * np.maximum(1.0, np.abs(mean))
    std = np.where(active, std, 1.0)
    scaler = Standardizer(mean, std, active)
    return replace(view, values=scaler.transform(view.values)), scaler


def decide_width(n_train: int, n_features: int, ratio_threshold: float = 1.0) -> bool:
    """True when a view should use the dual (relevance-vector) formulation."""
    if n_train < 1 or n_features < 1 or ratio_threshold <= 0:
        raise ValueError("decide_width needs positive sizes and threshold")
    return n_features > ratio_threshold * n_train


def select_relevance_vectors(n_train: int, strategy="all", k=None, seed=0) -> list:
    if strategy == "all":
        return list(range(n_train))
    if strategy != "random-k":
        raise ValueError(f"unknown relevance-vector strategy {strategy!r}")
    if k is None or k < 1:
        raise ValueError("random-k needs k >= 1")
    if k > n_train:
        raise KTooLarge(f"cannot pick {k} relevance vectors from {n_train} rows")
    rng = np.random.default_rng(seed)
    return sorted(rng.choice(n_train, size=k, replace=False).tolist())


def split_folds(dataset_or_labels, n_folds: int, seed: int = 0, stratified: bool = True):
    """Partition rows into ``n_folds`` (train, test) index pairs.

    Stratification uses the first target column; each class is shuffled and
    dealt round-robin so per-fold class counts differ by at most one.
    """
    if n_folds < 2:
        raise ValueError("n_folds must be at least 2")
    if isinstance(dataset_or_labels, MultiViewDataset):
        labels = dataset_or_labels.targets.values[:, 0]
    else:
        labels = np.asarray(dataset_or_labels)
        if labels.ndim == 2:
            labels = labels[:, 0]
    n = labels.shape[0]
    if n < n_folds:
        raise InsufficientClassMembers(f"{n} samples cannot fill {n_folds} folds")
    rng = np.random.default_rng(seed)
    assignment = np.empty(n, dtype=int)
    if stratified:
        offset = 0
        for cls in np.unique(labels):
            idx = np.flatnonzero(labels == cls)
            if idx.size < n_folds:
                raise InsufficientClassMembers(
                    f"class {cls:g} has {idx.size} members, fewer than {n_folds} folds"
                )
            idx = rng.permutation(idx)
            assignment[idx] = (np.arange(idx.size) + offset) % n_folds
            offset += idx.size
    else:
        perm = rng.permutation(n)
        assignment[perm] = np.arange(n) % n_folds
    all_rows = np.arange(n)
    return [
        (all_rows[assignment != f], all_rows[assignment == f]) for f in range(n_folds)
    ]


def export_folds(folds, path):
    payload = [
        {"fold": i, "train": tr.tolist(), "test": te.tolist()}
        for i, (tr, te) in enumerate(folds)
    ]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)
        fh.write("\n")


def import_folds(path):
    if not os.path.isfile(path):
        raise MissingFile(f"fold file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    return [(np.asarray(f["train"], dtype=int), np.asarray(f["test"], dtype=int)) for f in payload]


def check_training_targets(targets: TargetMatrix, context="training split"):
    vals = targets.values
    for c in range(vals.shape[1]):
        col = vals[:, c]
        if col.min() == col.max():
            raise InputError(
                f"{context}: target column {targets.class_names[c]!r} has a single class"
            )


def as_view_list(x_star, names: Sequence[str]):
    """Normalise a prediction input (dict, list or single array) to a name->array dict."""
    if isinstance(x_star, MultiViewDataset):
        return {v.view_name: v.values for v in x_star.views}
    if isinstance(x_star, dict):
        return {k: (v.values if isinstance(v, ViewMatrix) else np.asarray(v, float)) for k, v in x_star.items()}
    if isinstance(x_star, np.ndarray):
        x_star = [x_star]
    return {
        name: (v.values if isinstance(v, ViewMatrix) else np.asarray(v, float))
        for name, v in zip(names, x_star)
    }
