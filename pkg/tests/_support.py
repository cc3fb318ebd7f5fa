"""Shared builders for the test suite: small datasets, reachable states, perturbations."""

import numpy as np

from baldur.data import MultiViewDataset, TargetMatrix, ViewMatrix
from baldur.inference import (
    FitConfig,
    compute_elbo,
    sweep,
    update_A,
    update_delta,
    update_gamma,
    update_omega,
    update_psi,
    update_tau,
    update_V,
    update_W,
    update_Y_and_xi,
    update_Z,
)
from baldur.state import GammaQ, init_state


def separable(seed, n=200, d=5, noise=0.0):
    """Single-view data with labels from a random hyperplane."""
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, d))
    w = rng.normal(size=d)
    t = (X @ w + noise * rng.normal(size=n) > 0).astype(float)
    return X, t


def mixed_dataset(seed, n=24, d=(4, 40), c=1):
    """A primal view and a wide view with labels tied to the first."""
    rng = np.random.default_rng(seed)
    views = [ViewMatrix(rng.normal(size=(n, dm)), None, f"v{m}") for m, dm in enumerate(d)]
    score = views[0].values @ rng.normal(size=(d[0], c)) + 0.5 * rng.normal(size=(n, c))
    t = (score > np.median(score, axis=0)).astype(float)
    return MultiViewDataset(views, TargetMatrix(t))


def reachable_state(seed, k=3):
    """init_state followed by a random number of sweeps (some Gaussian-only)."""
    rng = np.random.default_rng(1000 + seed)
    ds = mixed_dataset(seed, n=int(rng.integers(15, 30)), c=int(rng.integers(1, 3)))
    state = init_state(ds, FitConfig(k_init=k, seed=seed))
    for _ in range(int(rng.integers(1, 4))):
        sweep(state, gamma_factors=False)
    for _ in range(int(rng.integers(1, 6))):
        sweep(state)
    return state


def _primal(state):
    return next(m for m, v in enumerate(state.views) if not v.dual)


def _dual(state):
    return next(m for m, v in enumerate(state.views) if v.dual)


# name -> (apply update, factor key used by ``perturb``)
UPDATES = {
    "W": (lambda s: update_W(s, _primal(s)), "W"),
    "A": (lambda s: update_A(s, _dual(s)), "A"),
    "delta": (lambda s: update_delta(s, _primal(s)), "delta"),
    "gamma": (lambda s: update_gamma(s, _dual(s)), "gamma"),
    "Z": (update_Z, "Z"),
    "tau": (update_tau, "tau"),
    "V": (update_V, "V"),
    "omega": (update_omega, "omega"),
    "psi": (update_psi, "psi"),
    "Y_xi": (update_Y_and_xi, "xi"),
}


def _scale_gamma(g, rng, eps):
    return GammaQ(g.alpha * (1 + eps * rng.choice([-1, 1], size=g.alpha.shape)),
                  g.beta * (1 + eps * rng.choice([-1, 1], size=g.beta.shape)))


def perturb(state, key, eps, rng):
    """Move one factor's parameters by a relative step of size ``eps``."""
    s = state.copy()
    sign = lambda shape: eps * rng.choice([-1.0, 1.0], size=shape)
    if key in ("W", "A"):
        v = s.views[_primal(s) if key == "W" else _dual(s)]
        v.mean = v.mean + sign(v.mean.shape) * np.maximum(np.abs(v.mean), 1e-3)
        scale = 1 + sign(v.cov.shape[0])
        v.cov = v.cov * scale[:, None, None]
        v.logdet = v.logdet + v.cov.shape[1] * np.log(scale)
        v.refresh()
    elif key == "delta":
        v = s.views[_primal(s)]
        v.delta = _scale_gamma(v.delta, rng, eps)
    elif key == "gamma":
        v = s.views[_dual(s)]
        v.gamma = _scale_gamma(v.gamma, rng, eps)
        v.refresh_gamma()
    elif key == "Z":
        s.Z_mean = s.Z_mean + sign(s.Z_mean.shape) * np.maximum(np.abs(s.Z_mean), 1e-3)
        scale = 1 + sign(())
        s.Z_cov = s.Z_cov * scale
        s.Z_logdet += s.K * np.log(scale)
    elif key == "V":
        s.V_mean = s.V_mean + sign(s.V_mean.shape) * np.maximum(np.abs(s.V_mean), 1e-3)
        scale = 1 + sign(())
        s.V_cov = s.V_cov * scale
        s.V_logdet += s.K * np.log(scale)
    elif key in ("tau", "psi", "omega"):
        setattr(s, key, _scale_gamma(getattr(s, key), rng, eps))
    elif key == "xi":
        s.xi = s.xi * (1 + sign(s.xi.shape))
    else:
        raise KeyError(key)
    return s


def elbo_after(state, op):
    s = state.copy()
    op(s)
    return s, compute_elbo(s)
