"""Coordinate-ascent variational inference, the evidence lower bound and pruning.

Each ``update_*`` function replaces one factor of the mean-field posterior by
its optimum given all the others, so the lower bound returned by
:func:`compute_elbo` never decreases under any single update.
"""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .bound import jaakkola_lambda, log_sigmoid
from .data import MultiViewDataset
from .errors import AllFactorsPruned, NegativeBeta, NumericalBreakdown
from .predict import FittedModel, FittedView
from .state import GammaQ, HyperPriors, ModelState, init_state, invert_precision

log = logging.getLogger(__name__)

LOG_2PI = np.log(2 * np.pi)
LOG_2PI_E = LOG_2PI + 1.0


class CollapsedFitWarning(UserWarning):
    """Every latent factor was pruned and the null model was returned."""


class NonConvergenceWarning(UserWarning):
    pass


@dataclass
class PruneConfig:
    weight_power_rel_threshold: float = 1e-10
    burn_in_iters: int = 10
    view_prune_enabled: bool = True
    # measure power with E[w^2] instead of <w>^2
    second_moment: bool = False

    def __post_init__(self):
        if not 0 <= self.weight_power_rel_threshold < 1:
            raise ValueError("weight_power_rel_threshold must lie in [0, 1)")
        if self.burn_in_iters < 0:
            raise ValueError("burn_in_iters must be >= 0")


@dataclass
class FitConfig:
    k_init: int = 20
    max_iters: int = 500
    elbo_rel_tol: float = 1e-6
    patience: int = 3
    hyperpriors: HyperPriors = field(default_factory=HyperPriors)
    prune: PruneConfig = field(default_factory=PruneConfig)
    prune_enabled: bool = True
    seed: int = 0
    ratio_threshold: float = 1.0
    rv_strategy: str = "all"
    rv_k: Optional[int] = None
    # warm-up sweeps update only the Gaussian factors and xi, Gamma factors held at
    # their start values, until the fitted output Z<V>^T settles
    warmup_min_iters: int = 10
    warmup_max_iters: int = 500
    warmup_tol: float = 1e-3
    align_after_warmup: bool = True
    # return a model with no factors (every probability 0.5) instead of raising
    # AllFactorsPruned when the data carry no usable signal
    null_model_on_collapse: bool = False

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.elbo_rel_tol > 0:
            raise ValueError("elbo_rel_tol must be > 0")
        if self.k_init < 1:
            raise ValueError("k_init must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if not 0 <= self.warmup_min_iters <= self.warmup_max_iters:
            raise ValueError("need 0 <= warmup_min_iters <= warmup_max_iters")
        if not self.warmup_tol > 0:
            raise ValueError("warmup_tol must be > 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FitConfig":
        d = dict(d)
        hp = d.pop("hyperpriors", {}) or {}
        pr = d.pop("prune", {}) or {}
        return cls(
            hyperpriors=HyperPriors(**{k: tuple(v) for k, v in hp.items()}),
            prune=PruneConfig(**pr),
            **d,
        )


@dataclass
class ElboTrace:
    """Per-iteration record. ``pruned[i]`` marks a pruning event right after iteration i,
    so bound values i and i+1 are not comparable."""

    iteration: list = field(default_factory=list)
    elbo: list = field(default_factory=list)
    K: list = field(default_factory=list)
    active_features: list = field(default_factory=list)
    wall_time: list = field(default_factory=list)
    pruned: list = field(default_factory=list)
    warmup: list = field(default_factory=list)

    def append(self, it, elbo, K, active, wall, pruned, warmup=False):
        self.warmup.append(bool(warmup))
        self.iteration.append(it)
        self.elbo.append(float(elbo))
        self.K.append(int(K))
        self.active_features.append(list(active))
        self.wall_time.append(float(wall))
        self.pruned.append(bool(pruned))

    def __len__(self):
        return len(self.elbo)

    def worst_decrease(self) -> float:
        """Largest relative drop of the bound between comparable iterations (0 if none)."""
        worst = 0.0
        for i in range(len(self.elbo) - 1):
            if self.pruned[i]:
                continue
            a, b = self.elbo[i], self.elbo[i + 1]
            worst = max(worst, (a - b) / max(abs(a), 1e-300))
        return worst

    def to_csv(self, path, view_names=None):
        n_views = len(self.active_features[0]) if self.active_features else 0
        names = view_names or [f"view{m}" for m in range(n_views)]
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(",".join(["iteration", "elbo", "K", "pruned", "warmup", "wall_time"]
                              + [f"active_{n}" for n in names]) + "\n")
            for i in range(len(self.elbo)):
                row = [str(self.iteration[i]), repr(self.elbo[i]), str(self.K[i]),
                       str(int(self.pruned[i])), str(int(self.warmup[i])), f"{self.wall_time[i]:.6f}"]
                row += [str(c) for c in self.active_features[i]]
                fh.write(",".join(row) + "\n")

    def summary(self) -> dict:
        return {
            "iterations": len(self.elbo),
            "final_elbo": self.elbo[-1] if self.elbo else None,
            "final_K": self.K[-1] if self.K else None,
            "warmup_iterations": int(sum(self.warmup)),
            "prune_events": int(sum(self.pruned)),
            "worst_relative_decrease": self.worst_decrease(),
        }


# -- expected quadratic forms ------------------------------------------------

def latent_residual_energy(state: ModelState) -> float:
    """0.5 E[sum_n ||z_n - sum_m P_m,n||^2]; the rate increment of q(tau)."""
    hs = state.H_sum()
    quad = (
        np.trace(state.ZtZ())
        - 2.0 * np.sum(state.Z_mean * hs)
        + np.sum(hs * hs)
        + sum(v.projection_variance() for v in state.views)
    )
    return 0.5 * float(quad)


def output_residual_energy(state: ModelState) -> float:
    """0.5 E[sum_n ||y_n - z_n V^T||^2]; the rate increment of q(psi)."""
    y2 = state.Y_mean**2 + state.Y_var
    quad = (
        np.sum(y2)
        - 2.0 * np.sum(state.Y_mean * (state.Z_mean @ state.V_mean.T))
        + np.sum(state.VtV() * state.ZtZ())
    )
    return 0.5 * float(quad)


def v_column_energy(state: ModelState):
    """<v_{:,k}^T v_{:,k}> per factor."""
    return np.sum(state.V_mean**2, axis=0) + state.C * np.diag(state.V_cov)


# -- coordinate updates --------------------------------------------------------

def compute_H(state: ModelState, m: int) -> np.ndarray:
    return state.views[m].H


def _update_weights(state, m):
    view = state.views[m]
    target = state.Z_mean - (state.H_sum() - view.H)
    view.update(float(state.tau.mean), target)


def update_W(state: ModelState, m: int):
    if state.views[m].dual:
        raise ValueError(f"view {state.views[m].name!r} is dual; use update_A")
    _update_weights(state, m)


def update_A(state: ModelState, m: int):
    if not state.views[m].dual:
        raise ValueError(f"view {state.views[m].name!r} is primal; use update_W")
    _update_weights(state, m)


def update_weights(state: ModelState, m: int):
    _update_weights(state, m)


def update_delta(state: ModelState, m: int):
    view = state.views[m]
    a0, b0 = state.hp.delta
    alpha = np.full(state.K, view.n_features / 2.0 + a0)
    view.delta = GammaQ(alpha, b0 + 0.5 * view.factor_quadratic())


def update_gamma(state: ModelState, m: int):
    view = state.views[m]
    a0, b0 = state.hp.gamma
    alpha = np.full(view.n_features, state.K / 2.0 + a0)
    view.gamma = GammaQ(alpha, b0 + 0.5 * view.feature_quadratic())
    if view.dual:
        view.refresh_gamma()


def update_Z(state: ModelState):
    tau, psi = float(state.tau.mean), float(state.psi.mean)
    prec = tau * np.eye(state.K) + psi * state.VtV()
    state.Z_cov, state.Z_logdet = invert_precision(prec, "Z")
    state.Z_mean = (tau * state.H_sum() + psi * state.Y_mean @ state.V_mean) @ state.Z_cov


def update_tau(state: ModelState):
    a0, b0 = state.hp.tau
    energy = latent_residual_energy(state)
    if energy < 0:
        raise NegativeBeta(f"tau rate increment is negative ({energy:.3e})")
    state.tau = GammaQ(state.N * state.K / 2.0 + a0, b0 + energy)


def update_V(state: ModelState):
    psi = float(state.psi.mean)
    prec = np.diag(state.omega.mean) + psi * state.ZtZ()
    state.V_cov, state.V_logdet = invert_precision(prec, "V")
    state.V_mean = psi * state.Y_mean.T @ state.Z_mean @ state.V_cov


def update_omega(state: ModelState):
    a0, b0 = state.hp.omega
    state.omega = GammaQ(np.full(state.K, state.C / 2.0 + a0), b0 + 0.5 * v_column_energy(state))


def update_psi(state: ModelState):
    a0, b0 = state.hp.psi
    energy = output_residual_energy(state)
    if energy < 0:
        raise NegativeBeta(f"psi rate increment is negative ({energy:.3e})")
    state.psi = GammaQ(state.N * state.C / 2.0 + a0, b0 + energy)


def update_Y_and_xi(state: ModelState):
    psi = float(state.psi.mean)
    state.Y_var = 1.0 / (psi + 2.0 * jaakkola_lambda(state.xi))
    state.Y_mean = (state.T - 0.5 + psi * state.Z_mean @ state.V_mean.T) * state.Y_var
    state.xi = np.sqrt(state.Y_mean**2 + state.Y_var)


def sweep(state: ModelState, gamma_factors: bool = True):
    """One full pass: per view (weights, delta, gamma), then Z, tau, V, omega, psi, Y and xi.

    With ``gamma_factors=False`` only the Gaussian factors and xi are updated.
    """
    for m in range(len(state.views)):
        update_weights(state, m)
        if gamma_factors:
            update_delta(state, m)
            update_gamma(state, m)
    update_Z(state)
    if gamma_factors:
        update_tau(state)
    update_V(state)
    if gamma_factors:
        update_omega(state)
        update_psi(state)
    update_Y_and_xi(state)


# -- lower bound ---------------------------------------------------------------

def xi_component(state: ModelState) -> float:
    """E_q[ln h(Y, xi)], the only part of the bound that depends on xi."""
    y2 = state.Y_mean**2 + state.Y_var
    xi = state.xi
    return float(
        np.sum(
            log_sigmoid(xi)
            + state.Y_mean * state.T
            - 0.5 * (state.Y_mean + xi)
            - jaakkola_lambda(xi) * (y2 - xi * xi)
        )
    )


def elbo_terms(state: ModelState) -> dict:
    N, K, C = state.N, state.K, state.C
    hp = state.hp
    terms = {}
    terms["likelihood_bound"] = xi_component(state)
    terms["y_given_z"] = (
        0.5 * N * C * (float(state.psi.log_mean) - LOG_2PI)
        - float(state.psi.mean) * output_residual_energy(state)
    )
    terms["z_given_x"] = (
        0.5 * N * K * (float(state.tau.log_mean) - LOG_2PI)
        - float(state.tau.mean) * latent_residual_energy(state)
    )
    terms["v_given_omega"] = (
        0.5 * C * float(np.sum(state.omega.log_mean)) - 0.5 * C * K * LOG_2PI
        - 0.5 * float(np.sum(state.omega.mean * v_column_energy(state)))
    )
    terms["gamma_priors"] = (
        state.tau.expected_log_prior(hp.tau)
        + state.psi.expected_log_prior(hp.psi)
        + state.omega.expected_log_prior(hp.omega)
    )
    weights = 0.0
    for v in state.views:
        D = v.n_features
        weights += (
            -0.5 * K * D * LOG_2PI
            + 0.5 * D * float(np.sum(v.delta.log_mean))
            + 0.5 * K * float(np.sum(v.gamma.log_mean))
            - 0.5 * float(np.sum(v.delta.mean * v.factor_quadratic()))
            + v.delta.expected_log_prior(hp.delta)
            + v.gamma.expected_log_prior(hp.gamma)
        )
    terms["weights"] = weights
    terms["entropy_gaussian"] = (
        0.5 * float(np.sum(np.log(state.Y_var))) + 0.5 * N * C * LOG_2PI_E
        + N * (0.5 * K * LOG_2PI_E + 0.5 * state.Z_logdet)
        + C * (0.5 * K * LOG_2PI_E + 0.5 * state.V_logdet)
        + sum(v.entropy() for v in state.views)
    )
    terms["entropy_gamma"] = (
        state.tau.entropy() + state.psi.entropy() + state.omega.entropy()
        + sum(v.delta.entropy() + v.gamma.entropy() for v in state.views)
    )
    return terms


def compute_elbo(state: ModelState) -> float:
    """Evidence lower bound E_q[ln p] - E_q[ln q] including every constant."""
    value = float(sum(elbo_terms(state).values()))
    if not np.isfinite(value):
        raise NumericalBreakdown("lower bound is not finite")
    return value


# -- pruning -------------------------------------------------------------------

@dataclass
class PruneReport:
    features_removed: dict = field(default_factory=dict)
    factors_removed: int = 0
    views_removed: list = field(default_factory=list)

    @property
    def any(self) -> bool:
        return bool(self.factors_removed or self.views_removed or any(self.features_removed.values()))


def _keep_factors(state: ModelState, keep):
    state.Z_mean = state.Z_mean[:, keep]
    state.Z_cov = state.Z_cov[np.ix_(keep, keep)]
    state.Z_logdet = float(np.linalg.slogdet(state.Z_cov)[1])
    state.V_mean = state.V_mean[:, keep]
    state.V_cov = state.V_cov[np.ix_(keep, keep)]
    state.V_logdet = float(np.linalg.slogdet(state.V_cov)[1])
    state.omega = state.omega.keep(keep)
    for v in state.views:
        v.keep_factors(keep)


def _sync_descriptor(state, view):
    desc = state.descriptors[view.index]
    mask = np.zeros_like(desc.active_features)
    mask[view.feature_index] = True
    desc.active_features = mask


def prune(state: ModelState, config: PruneConfig) -> PruneReport:
    """Drop views, features and latent factors whose weight power is negligible.

    A view goes when its total power is below ``threshold`` times the largest
    view's; a feature when its power is below ``threshold`` times the largest
    feature power in its view; a factor when its power summed over views and
    the output head is below ``threshold`` times the largest factor's.
    """
    thr = config.weight_power_rel_threshold
    report = PruneReport()
    if thr <= 0:
        return report
    sm = config.second_moment

    if config.view_prune_enabled and len(state.views) > 1:
        totals = np.array([v.feature_power(sm).sum() for v in state.views])
        drop = totals < thr * totals.max()
        for v, d in zip(state.views, drop):
            if d:
                report.views_removed.append(v.name)
                state.descriptors[v.index].active_features[:] = False
        state.views = [v for v, d in zip(state.views, drop) if not d]

    for v in state.views:
        power = v.feature_power(sm)
        keep = power >= thr * power.max()
        removed = int(np.sum(~keep))
        if removed:
            v.keep_features(keep)
            _sync_descriptor(state, v)
            report.features_removed[v.name] = removed

    power = sum(v.factor_power(sm) for v in state.views) + np.sum(state.V_mean**2, axis=0)
    keep = power >= thr * power.max() if power.max() > 0 else np.zeros(state.K, bool)
    if not keep.any():
        raise AllFactorsPruned("every latent factor has zero weight power; the fit collapsed")
    if not keep.all():
        report.factors_removed = int(np.sum(~keep))
        _keep_factors(state, keep)
    return report


# -- driver --------------------------------------------------------------------

def freeze(state: ModelState, config: FitConfig, trace: ElboTrace, converged: bool, notes=()) -> FittedModel:
    views = []
    for v in state.views:
        desc = state.descriptors[v.index]
        fv = FittedView(
            name=v.name,
            s_flag=bool(v.dual),
            standardizer=desc.standardizer,
            active=desc.active_features.copy(),
            feature_names=list(state.feature_names[v.index]),
            cov=(v.A_cov if v.dual else v.cov.copy()),
        )
        if v.dual:
            fv.A = v.A
            fv.Xrv = v.Xrv.copy()
            fv.rv_indices = v.rv_indices.copy()
        else:
            fv.weights = v.mean.copy()
        views.append(fv)
    return FittedModel(
        views=views,
        view_names=list(state.view_names),
        n_original_features=list(state.n_original_features),
        V_mean=state.V_mean.copy(),
        V_cov=state.V_cov.copy(),
        tau_mean=float(state.tau.mean),
        psi_mean=float(state.psi.mean),
        class_names=list(state.class_names),
        converged=converged,
        warnings=list(notes),
        config=config.to_dict(),
        trace_summary=trace.summary(),
    )


def _active(state):
    return [int(d.active_features.sum()) for d in state.descriptors]


def _isotropic(q) -> bool:
    return bool(np.all(q.alpha == q.alpha[0]) and np.all(q.beta == q.beta[0]))


def align_factors(state: ModelState) -> bool:
    """Rotate the latent basis so the output weights <V> become column-orthogonal.

    While every factor shares the same prior precisions (as after the warm-up)
    the bound is invariant under an orthogonal change of latent basis, so this
    moves all of the output signal into the leading min(C, K) factors at no cost
    to the bound. Returns False, leaving the state untouched, when the
    precisions differ between factors.
    """
    if not _isotropic(state.omega) or not all(_isotropic(v.delta) for v in state.views):
        return False
    _, _, Rt = np.linalg.svd(state.V_mean, full_matrices=True)
    R = Rt.T
    state.Z_mean = state.Z_mean @ R
    state.Z_cov = R.T @ state.Z_cov @ R
    state.V_mean = state.V_mean @ R
    state.V_cov = R.T @ state.V_cov @ R
    for v in state.views:
        # identical per-factor covariances, so only the means rotate
        v.mean = R.T @ v.mean if not v.dual else v.mean @ R
        v.refresh()
    return True


def warm_up(state: ModelState, config: FitConfig, trace: ElboTrace):
    """Gaussian-only sweeps until the fitted output stops moving. Returns sweeps done.

    Starting from V = 0 the Gamma updates would see a near-zero signal and
    switch every factor off before the data had a chance to pull it away from
    the origin; letting the Gaussian chain settle first avoids that.
    """
    previous = None
    done = 0
    for it in range(config.warmup_max_iters):
        t0 = time.perf_counter()
        sweep(state, gamma_factors=False)
        done += 1
        out = state.Z_mean @ state.V_mean.T
        trace.append(it, compute_elbo(state), state.K, _active(state),
                     time.perf_counter() - t0, False, warmup=True)
        if previous is not None and it + 1 >= config.warmup_min_iters:
            scale = max(float(np.linalg.norm(out)), 1e-300)
            if float(np.linalg.norm(out - previous)) < config.warmup_tol * scale:
                break
        previous = out
    if done and config.align_after_warmup:
        align_factors(state)
    return done


def run(state: ModelState, config: FitConfig, trace: Optional[ElboTrace] = None):
    """Warm up, then iterate full sweeps until convergence. Returns (trace, converged)."""
    trace = ElboTrace() if trace is None else trace
    offset = warm_up(state, config, trace)
    streak = 0
    previous = None
    converged = False
    for it in range(config.max_iters):
        t0 = time.perf_counter()
        sweep(state)
        elbo = compute_elbo(state)
        report = None
        if config.prune_enabled and it + 1 >= config.prune.burn_in_iters:
            report = prune(state, config.prune)
            if report.any:
                log.info("iteration %d: pruned %s", offset + it, report)
        pruned = report is not None and report.any
        trace.append(offset + it, elbo, state.K, _active(state), time.perf_counter() - t0, pruned)
        if previous is not None:
            rel = abs(elbo - previous) / max(abs(previous), 1e-300)
            streak = streak + 1 if rel < config.elbo_rel_tol else 0
        if pruned:
            streak = 0
            previous = None
        else:
            previous = elbo
        if streak >= config.patience:
            converged = True
            break
    return trace, converged


def null_model(state: ModelState, config: FitConfig, trace: ElboTrace, reason: str) -> FittedModel:
    """A factor-free model: every view removed, every probability 0.5."""
    return FittedModel(
        views=[],
        view_names=list(state.view_names),
        n_original_features=list(state.n_original_features),
        V_mean=np.zeros((state.C, 0)),
        V_cov=np.zeros((0, 0)),
        tau_mean=float(state.tau.mean),
        psi_mean=float(state.psi.mean),
        class_names=list(state.class_names),
        converged=False,
        warnings=[{"kind": "collapsed", "message": reason}],
        config=config.to_dict(),
        trace_summary=trace.summary(),
    )


def fit(dataset: MultiViewDataset, config: Optional[FitConfig] = None):
    """Fit the model to a training dataset. Returns (FittedModel, ElboTrace)."""
    config = FitConfig() if config is None else config
    state = init_state(dataset, config)
    trace = ElboTrace()
    try:
        trace, converged = run(state, config, trace)
    except AllFactorsPruned as exc:
        if not config.null_model_on_collapse:
            raise
        warnings.warn(f"{exc}; returning the null model", CollapsedFitWarning, stacklevel=2)
        return null_model(state, config, trace, str(exc)), trace
    notes = []
    if not converged:
        msg = f"bound did not converge within {config.max_iters} iterations"
        warnings.warn(msg, NonConvergenceWarning, stacklevel=2)
        notes.append({"kind": "non_convergence", "message": msg})
    kept = sum(int(d.active_features.sum()) for d in state.descriptors)
    total = sum(state.n_original_features)
    if kept < 0.01 * total:
        notes.append({"kind": "heavy_pruning", "message": f"{kept} of {total} features kept"})
    return freeze(state, config, trace, converged, notes), trace
