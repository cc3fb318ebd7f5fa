"""Command-line front end.

Exit codes: 0 on success (warnings included), 2 for input errors, 3 for
numerical failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .data import load_dataset, load_views, save_dataset, write_csv_matrix
from .errors import BaldurError, InputError, NumericalError, ViewMissing
from .evaluation import (
    FoldError,
    SynthConfig,
    compute_metrics,
    cross_validate,
    feature_report,
    percent_features_selected,
    synth_generate,
    write_feature_report,
)
from .inference import FitConfig, PruneConfig, fit
from .persistence import load_model, save_model, write_json, write_metrics_csv, write_predictions
from .predict import predict_label, predict_proba

log = logging.getLogger("baldur")

EXIT_OK, EXIT_INPUT, EXIT_NUMERICAL = 0, 2, 3


@dataclass
class RunConfig:
    """Parsed command line of one invocation."""

    subcommand: str
    manifest: Optional[str] = None
    out: str = "."
    fit: FitConfig = field(default_factory=FitConfig)
    dual_views: list = field(default_factory=list)
    primal_views: list = field(default_factory=list)
    folds: int = 5
    threshold: float = 0.5
    model: Optional[str] = None


# -- argument parsing ----------------------------------------------------------

def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected an integer >= 1, got {text}")
    return value


def _positive_float(text):
    value = float(text)
    if not value > 0:
        raise argparse.ArgumentTypeError(f"expected a number > 0, got {text}")
    return value


def _probability(text):
    value = float(text)
    if not 0 <= value <= 1:
        raise argparse.ArgumentTypeError(f"expected a number in [0, 1], got {text}")
    return value


def _int_list(text):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _add_common(p, manifest=True):
    if manifest:
        p.add_argument("--manifest", required=True, help="JSON manifest listing view CSVs and targets")
    p.add_argument("--out", default=".", help="output directory (created if missing)")
    p.add_argument("--seed", type=int, help="random seed (default 0, or the --config value)")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_fit(p):
    g = p.add_argument_group("fit")
    g.add_argument("--config", help="JSON file with fit settings; unknown keys are rejected")
    g.add_argument("--k-init", type=_positive_int)
    g.add_argument("--max-iters", type=_positive_int)
    g.add_argument("--elbo-tol", type=_positive_float, help="relative bound change counted as converged")
    g.add_argument("--prune-threshold", type=float, help="relative weight power below which parts are pruned")
    g.add_argument("--no-prune", action="store_true")
    g.add_argument("--dual", action="append", default=[], metavar="VIEW",
                   help="force the relevance-vector form for a view (repeatable)")
    g.add_argument("--primal", action="append", default=[], metavar="VIEW",
                   help="force the feature-space form for a view (repeatable)")
    g.add_argument("--null-on-collapse", action="store_true",
                   help="return a factor-free model instead of failing when every factor is pruned")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="baldur", description="Multi-view sparse Bayesian classifier.")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("train", help="fit a model and write it with its trace and feature report")
    _add_common(p)
    _add_fit(p)

    p = sub.add_parser("predict", help="score a dataset with a saved model")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--threshold", type=_probability, default=0.5)

    p = sub.add_parser("cv", help="k-fold cross-validation with per-fold and aggregate metrics")
    _add_common(p)
    _add_fit(p)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--threshold", type=_probability, default=0.5)

    p = sub.add_parser("synth", help="sample a dataset from the generative model")
    _add_common(p, manifest=False)
    p.add_argument("--n", type=_positive_int, default=200)
    p.add_argument("--d", type=_int_list, default=[20, 20], help="features per view, e.g. 20,300")
    p.add_argument("--relevant", type=_int_list, default=[5, 5], help="relevant features per view")
    p.add_argument("--k-true", type=_positive_int, default=2)
    p.add_argument("--classes", type=_positive_int, default=1)
    p.add_argument("--tau", type=_positive_float, default=10.0)
    p.add_argument("--psi", type=_positive_float, default=10.0)
    p.add_argument("--label-mode", choices=("bernoulli", "threshold"), default="bernoulli")
    p.add_argument("--w-scale", type=_positive_float, default=1.0)
    p.add_argument("--logit-scale", type=_positive_float)
    p.add_argument("--views", help="comma-separated view names")

    p = sub.add_parser("report", help="summarize a saved model")
    p.add_argument("--model", required=True)
    p.add_argument("--out", help="also write features.csv and summary.json here")
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


def fit_config_from_args(args) -> FitConfig:
    base = {}
    if getattr(args, "config", None):
        if not os.path.isfile(args.config):
            raise InputError(f"config file not found: {args.config}")
        with open(args.config, encoding="utf-8") as fh:
            try:
                base = json.load(fh)
            except json.JSONDecodeError as exc:
                raise InputError(f"{args.config}: invalid JSON ({exc})") from None
        if not isinstance(base, dict):
            raise InputError(f"{args.config}: expected a JSON object")
    try:
        config = FitConfig.from_dict(base)
        prune = config.prune
        if args.prune_threshold is not None:
            prune = PruneConfig(**{**prune.__dict__, "weight_power_rel_threshold": args.prune_threshold})
        overrides = {
            "k_init": args.k_init,
            "max_iters": args.max_iters,
            "elbo_rel_tol": args.elbo_tol,
        }
        d = config.to_dict()
        d.update({k: v for k, v in overrides.items() if v is not None})
        d["prune"] = prune.__dict__
        if args.seed is not None:
            d["seed"] = args.seed
        if args.no_prune:
            d["prune_enabled"] = False
        if args.null_on_collapse:
            d["null_model_on_collapse"] = True
        return FitConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise InputError(f"invalid fit configuration: {exc}") from None


def parse_run_config(argv):
    """Returns (RunConfig, argparse.Namespace)."""
    args = build_parser().parse_args(argv)
    rc = RunConfig(subcommand=args.subcommand, out=args.out or ".")
    rc.manifest = getattr(args, "manifest", None)
    rc.model = getattr(args, "model", None)
    rc.threshold = getattr(args, "threshold", 0.5)
    rc.folds = getattr(args, "folds", 5)
    if hasattr(args, "k_init"):
        rc.fit = fit_config_from_args(args)
        rc.dual_views, rc.primal_views = list(args.dual), list(args.primal)
        both = set(rc.dual_views) & set(rc.primal_views)
        if both:
            raise InputError(f"views forced both dual and primal: {sorted(both)}")
    return rc, args


# -- subcommands ---------------------------------------------------------------

def _load_training_set(rc: RunConfig):
    dataset = load_dataset(rc.manifest)
    names = {v.view_name for v in dataset.views}
    for name in rc.dual_views + rc.primal_views:
        if name not in names:
            raise ViewMissing(f"--dual/--primal names unknown view {name!r}")
    for v in dataset.views:
        if v.view_name in rc.dual_views:
            v.force_dual = True
        elif v.view_name in rc.primal_views:
            v.force_dual = False
    return dataset


def _fit(dataset, config):
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        model, trace = fit(dataset, config)
    for w in caught:
        log.warning("%s", w.message)
    return model, trace


def cmd_train(rc: RunConfig) -> int:
    dataset = _load_training_set(rc)
    model, trace = _fit(dataset, rc.fit)
    os.makedirs(rc.out, exist_ok=True)
    save_model(model, os.path.join(rc.out, "model.json"))
    trace.to_csv(os.path.join(rc.out, "trace.csv"), model.view_names)
    write_feature_report(feature_report(model), os.path.join(rc.out, "features.csv"))
    write_json(os.path.join(rc.out, "warnings.json"), model.warnings)
    log.info("trained: K=%d, views kept %s, %.3g%% features, converged=%s",
             model.K, [v.name for v in model.views], percent_features_selected(model), model.converged)
    return EXIT_OK


def cmd_predict(rc: RunConfig) -> int:
    model = load_model(rc.model)
    views, targets = load_views(rc.manifest)
    prob = predict_proba(model, views)
    labels = predict_label(prob, rc.threshold)
    os.makedirs(rc.out, exist_ok=True)
    write_predictions(os.path.join(rc.out, "predictions.csv"), prob, labels, model.class_names)
    if targets is not None:
        if targets.n_samples != prob.shape[0] or targets.n_classes != prob.shape[1]:
            raise InputError(f"targets are {targets.values.shape}, predictions {prob.shape}")
        records = []
        for c, name in enumerate(model.class_names):
            rep = compute_metrics(targets.values[:, c], prob[:, c], rc.threshold)
            records.append({"class": name, **rep.as_dict()})
        write_metrics_csv(os.path.join(rc.out, "metrics.csv"), records)
    return EXIT_OK


def cmd_cv(rc: RunConfig) -> int:
    if rc.folds < 2:
        raise InputError(f"--folds must be at least 2, got {rc.folds}")
    dataset = _load_training_set(rc)
    with warnings.catch_warnings(record=True):
        warnings.simplefilter("always")
        result = cross_validate(dataset, rc.fit, n_folds=rc.folds, seed=rc.fit.seed, threshold=rc.threshold)
    os.makedirs(rc.out, exist_ok=True)
    write_metrics_csv(os.path.join(rc.out, "cv_metrics.csv"), result.records())
    write_json(os.path.join(rc.out, "cv_summary.json"), {
        "folds": rc.folds,
        "seed": rc.fit.seed,
        "mean": result.mean,
        "std": result.std,
        "warnings": result.warnings,
        "config": rc.fit.to_dict(),
    })
    log.info("cv auc %s +- %s", result.mean.get("auc"), result.std.get("auc"))
    return EXIT_OK


def cmd_synth(args) -> int:
    names = args.views.split(",") if args.views else None
    try:
        config = SynthConfig(
            N=args.n, D=args.d, relevant=args.relevant, K_true=args.k_true, C=args.classes,
            tau_true=args.tau, psi_true=args.psi, seed=args.seed or 0, label_mode=args.label_mode,
            w_scale=args.w_scale, logit_scale=args.logit_scale, view_names=names,
        )
    except ValueError as exc:
        raise InputError(f"invalid synth configuration: {exc}") from None
    dataset, truth = synth_generate(config)
    save_dataset(dataset, args.out)
    with open(os.path.join(args.out, "truth.csv"), "w", encoding="utf-8") as fh:
        fh.write("view,feature,relevant\n")
        for v, mask in zip(dataset.views, truth.relevant_masks):
            for name, rel in zip(v.feature_names, mask):
                fh.write(f"{v.view_name},{name},{int(rel)}\n")
    write_csv_matrix(os.path.join(args.out, "truth_V.csv"),
                     [f"factor_{k}" for k in range(config.K_true)], truth.V)
    write_json(os.path.join(args.out, "synth_config.json"), config.to_dict())
    return EXIT_OK


def cmd_report(args) -> int:
    model = load_model(args.model)
    summary = {
        "K": model.K,
        "classes": model.class_names,
        "views": model.view_names,
        "removed_views": model.removed_views,
        "percent_features_selected": percent_features_selected(model),
        "converged": model.converged,
        "warnings": model.warnings,
        "trace": model.trace_summary,
    }
    report = feature_report(model)
    print(f"latent factors: {model.K}")
    for v in model.views:
        kind = "dual" if v.s_flag else "primal"
        print(f"view {v.name} ({kind}): {int(v.active.sum())}/{v.n_original} features kept")
        for e in report[v.name][:5]:
            print(f"  {e.feature}  {e.total:.4g}")
    for name in model.removed_views:
        print(f"view {name}: removed")
    print(f"features selected: {summary['percent_features_selected']:.4g}%")
    for w in model.warnings:
        print(f"warning [{w.get('kind')}]: {w.get('message')}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        write_feature_report(report, os.path.join(args.out, "features.csv"))
        write_json(os.path.join(args.out, "summary.json"), summary)
    return EXIT_OK


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, FoldError):
        exc = exc.cause
    if isinstance(exc, NumericalError):
        return EXIT_NUMERICAL
    return EXIT_INPUT


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        rc, args = parse_run_config(argv)
    except SystemExit as exc:
        # argparse usage errors already exit 2; --help exits 0
        return int(exc.code or 0)
    except BaldurError as exc:
        print(f"baldur: error: {exc}", file=sys.stderr)
        return exit_code_for(exc)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    handlers = {
        "train": lambda: cmd_train(rc),
        "predict": lambda: cmd_predict(rc),
        "cv": lambda: cmd_cv(rc),
        "synth": lambda: cmd_synth(args),
        "report": lambda: cmd_report(args),
    }
    try:
        return handlers[rc.subcommand]()
    except BaldurError as exc:
        print(f"baldur: error: {exc}", file=sys.stderr)
        return exit_code_for(exc)
    except (np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"baldur: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (OSError, ValueError) as exc:
        print(f"baldur: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
