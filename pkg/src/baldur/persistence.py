"""Versioned JSON model files and delimited-text exports.

Arrays are stored as ``{"shape": [...], "data": [...]}`` with row-major
data. Python's float repr is the shortest string that parses back to the
same double, so every value round-trips bit-exactly.
"""

from __future__ import annotations

import csv
import json
import os

import numpy as np

from .data import Standardizer
from .errors import MissingFile, ModelFormatError
from .predict import FittedModel, FittedView

FORMAT_NAME = "baldur-model"
FORMAT_VERSION = 1


def encode_array(a, dtype=float):
    a = np.asarray(a)
    if dtype is bool:
        data = [bool(x) for x in a.ravel()]
    elif dtype is int:
        data = [int(x) for x in a.ravel()]
    else:
        data = [float(x) for x in a.ravel()]
    return {"shape": list(a.shape), "data": data}


def decode_array(obj, dtype=float, what="array"):
    try:
        shape = tuple(int(s) for s in obj["shape"])
        arr = np.array(obj["data"], dtype=dtype)
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"{what}: malformed array ({exc})") from None
    if arr.size != int(np.prod(shape)):
        raise ModelFormatError(f"{what}: {arr.size} values do not fill shape {shape}")
    return arr.reshape(shape)


def _opt(a, dtype=float):
    return None if a is None else encode_array(a, dtype)


def _view_to_dict(v: FittedView) -> dict:
    return {
        "name": v.name,
        "s_flag": bool(v.s_flag),
        "feature_names": list(v.feature_names),
        "active": encode_array(v.active, bool),
        "standardizer": {
            "mean": encode_array(v.standardizer.mean),
            "std": encode_array(v.standardizer.std),
            "active": encode_array(v.standardizer.active, bool),
        },
        "weights": _opt(v.weights),
        "A": _opt(v.A),
        "Xrv": _opt(v.Xrv),
        "rv_indices": _opt(v.rv_indices, int),
        "cov": _opt(v.cov),
    }


def _view_from_dict(d: dict) -> FittedView:
    name = d["name"]

    def arr(key, dtype=float):
        return None if d.get(key) is None else decode_array(d[key], dtype, f"view {name!r} {key}")

    s = d["standardizer"]
    view = FittedView(
        name=name,
        s_flag=bool(d["s_flag"]),
        standardizer=Standardizer(
            decode_array(s["mean"], float, f"view {name!r} mean"),
            decode_array(s["std"], float, f"view {name!r} std"),
            decode_array(s["active"], bool, f"view {name!r} scaler mask"),
        ),
        active=arr("active", bool),
        feature_names=list(d["feature_names"]),
        weights=arr("weights"),
        A=arr("A"),
        Xrv=arr("Xrv"),
        rv_indices=arr("rv_indices", int),
        cov=arr("cov"),
    )
    n_active = int(view.active.sum())
    width = (view.Xrv if view.s_flag else view.weights)
    if width is None or width.shape[1] != n_active:
        raise ModelFormatError(f"view {name!r}: weight width does not match its active mask")
    return view


def model_to_dict(model: FittedModel) -> dict:
    return {
        "format": FORMAT_NAME,
        "format_version": FORMAT_VERSION,
        "view_names": list(model.view_names),
        "n_original_features": [int(n) for n in model.n_original_features],
        "class_names": list(model.class_names),
        "views": [_view_to_dict(v) for v in model.views],
        "V_mean": encode_array(model.V_mean),
        "V_cov": encode_array(model.V_cov),
        "tau_mean": float(model.tau_mean),
        "psi_mean": float(model.psi_mean),
        "converged": bool(model.converged),
        "warnings": list(model.warnings),
        "config": model.config,
        "trace_summary": model.trace_summary,
    }


def model_from_dict(d: dict) -> FittedModel:
    if not isinstance(d, dict) or d.get("format") != FORMAT_NAME:
        raise ModelFormatError("not a model file")
    version = d.get("format_version")
    if version != FORMAT_VERSION:
        raise ModelFormatError(
            f"unsupported model format version {version!r} (this build reads {FORMAT_VERSION})"
        )
    try:
        return FittedModel(
            views=[_view_from_dict(v) for v in d["views"]],
            view_names=list(d["view_names"]),
            n_original_features=[int(n) for n in d["n_original_features"]],
            V_mean=decode_array(d["V_mean"], float, "V_mean"),
            V_cov=decode_array(d["V_cov"], float, "V_cov"),
            tau_mean=float(d["tau_mean"]),
            psi_mean=float(d["psi_mean"]),
            class_names=list(d["class_names"]),
            converged=bool(d["converged"]),
            warnings=list(d.get("warnings", [])),
            config=dict(d.get("config", {})),
            trace_summary=dict(d.get("trace_summary", {})),
        )
    except KeyError as exc:
        raise ModelFormatError(f"model file lacks field {exc}") from None


def dumps_model(model: FittedModel) -> str:
    return json.dumps(model_to_dict(model), sort_keys=True, indent=1, allow_nan=False) + "\n"


def loads_model(text: str) -> FittedModel:
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"model file is not valid JSON ({exc})") from None
    return model_from_dict(payload)


def save_model(model: FittedModel, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_model(model))


def load_model(path) -> FittedModel:
    if not os.path.isfile(path):
        raise MissingFile(f"model file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        return loads_model(fh.read())


# -- delimited exports ---------------------------------------------------------

def write_predictions(path, probabilities, labels, class_names, sample_ids=None):
    probabilities = np.atleast_2d(probabilities)
    n = probabilities.shape[0]
    ids = range(n) if sample_ids is None else sample_ids
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample"] + [f"p_{c}" for c in class_names] + [f"label_{c}" for c in class_names])
        for i, sid in enumerate(ids):
            w.writerow([sid] + [repr(float(p)) for p in probabilities[i]] + [int(x) for x in labels[i]])


def _fmt(x):
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def write_metrics_csv(path, records):
    """One row per record (dicts sharing keys); ``None`` becomes an empty cell."""
    keys = list(records[0].keys()) if records else []
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(keys)
        for r in records:
            w.writerow([_fmt(r.get(k)) for k in keys])


def write_json(path, payload):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1, allow_nan=False)
        fh.write("\n")
