"""Variational factors of the mean-field posterior and their initialisation.

Every view owns its weight block: a primal view keeps q(w_k) over the D
feature weights of each latent factor, a dual view keeps q(a_k) over the
relevance-vector coefficients. Both expose the same handful of expectations
the coordinate updates and the lower bound need, so the inference code never
branches on the formulation except to choose which update to run.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_solve
from scipy.special import digamma, gammaln

from .data import (
    MultiViewDataset,
    ViewDescriptor,
    check_training_targets,
    decide_width,
    select_relevance_vectors,
    standardize_fit_transform,
)
from .errors import NumericalBreakdown

LOG_2PI_E = np.log(2 * np.pi) + 1.0

JITTER_START = 1e-8
JITTER_MAX = 1e-2


@dataclass
class HyperPriors:
    """Shape/rate pairs of the Gamma priors; the same delta/gamma pair serves every view."""

    tau: tuple = (1e-14, 1e-14)
    psi: tuple = (1e-14, 1e-14)
    omega: tuple = (1e-14, 1e-14)
    delta: tuple = (1e-14, 1e-14)
    gamma: tuple = (1e-14, 1e-14)

    def __post_init__(self):
        for name in ("tau", "psi", "omega", "delta", "gamma"):
            a0, b0 = getattr(self, name)
            if not (a0 > 0 and b0 > 0):
                raise ValueError(f"hyperprior {name} must be strictly positive")
            setattr(self, name, (float(a0), float(b0)))


@dataclass
class GammaQ:
    """q(x) = Gamma(alpha, beta) with rate parametrisation, elementwise."""

    alpha: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        self.alpha = np.array(self.alpha, dtype=float)
        self.beta = np.array(self.beta, dtype=float)

    @classmethod
    def prior(cls, pair, size=None):
        a0, b0 = pair
        shape = () if size is None else (size,)
        return cls(np.full(shape, a0), np.full(shape, b0))

    @property
    def mean(self):
        return self.alpha / self.beta

    @property
    def log_mean(self):
        return digamma(self.alpha) - np.log(self.beta)

    def entropy(self) -> float:
        a, b = self.alpha, self.beta
        return float(np.sum(a - np.log(b) + gammaln(a) + (1.0 - a) * digamma(a)))

    def expected_log_prior(self, pair) -> float:
        """E_q[ln Gamma(x | a0, b0)] summed over elements."""
        a0, b0 = pair
        n = self.alpha.size
        return float(
            n * (a0 * np.log(b0) - gammaln(a0))
            + np.sum((a0 - 1.0) * self.log_mean - b0 * self.mean)
        )

    def keep(self, mask) -> "GammaQ":
        return GammaQ(self.alpha[mask], self.beta[mask])

    def check(self, name="gamma factor"):
        if not (np.all(self.alpha > 0) and np.all(self.beta > 0)):
            raise NumericalBreakdown(f"{name} left the positive orthant")


def gamma_mean(g: GammaQ):
    return g.mean


def second_moment(mean, cov, n=None):
    """Second moment of a Gaussian matrix factor.

    ``cov`` 2-D means one covariance shared by every row: returns
    mean^T mean + n * cov with n the row count. ``cov`` 3-D holds one covariance
    per row: returns the stack of outer(mean_r, mean_r) + cov_r.
    """
    mean = np.atleast_2d(np.asarray(mean, dtype=float))
    cov = np.asarray(cov, dtype=float)
    if cov.ndim == 3:
        return np.einsum("ri,rj->rij", mean, mean) + cov
    n = mean.shape[0] if n is None else n
    return mean.T @ mean + n * np.atleast_2d(cov)


# -- positive-definite algebra ----------------------------------------------

def robust_cholesky(precision, what="covariance"):
    """Lower Cholesky factor, adding escalating diagonal jitter only on failure."""
    p = 0.5 * (precision + precision.T)
    try:
        return np.linalg.cholesky(p), 0.0
    except LinAlgError:
        pass
    scale = float(np.mean(np.diag(p)))
    if not np.isfinite(scale) or scale <= 0:
        raise NumericalBreakdown(f"{what}: precision has non-positive diagonal")
    eye = np.eye(p.shape[0])
    jitter = JITTER_START
    while jitter <= JITTER_MAX * (1 + 1e-9):
        try:
            return np.linalg.cholesky(p + jitter * scale * eye), jitter
        except LinAlgError:
            jitter *= 10.0
    raise NumericalBreakdown(f"{what}: not positive definite even with jitter {JITTER_MAX}")


def invert_precision(precision, what="covariance"):
    """Return (covariance, log-determinant of covariance) for an SPD precision."""
    if not np.all(np.isfinite(precision)):
        raise NumericalBreakdown(f"{what}: non-finite precision")
    chol, _ = robust_cholesky(precision, what)
    cov = cho_solve((chol, True), np.eye(chol.shape[0]))
    cov = 0.5 * (cov + cov.T)
    return cov, -2.0 * float(np.sum(np.log(np.diag(chol))))


def is_spd(matrix, sym_tol=1e-10) -> bool:
    m = np.asarray(matrix)
    if np.max(np.abs(m - m.T), initial=0.0) > sym_tol * max(1.0, np.max(np.abs(m), initial=0.0)):
        return False
    try:
        robust_cholesky(m)
    except NumericalBreakdown:
        return False
    return True


# -- per-view weight blocks --------------------------------------------------

class PrimalWeights:
    """q(W) = prod_k N(w_k | mean[k], cov[k]) over the view's active features."""

    dual = False

    def __init__(self, index, name, X, K, rng, hp: HyperPriors, feature_index=None):
        self.index = index
        self.name = name
        self.X = X
        n_feat = X.shape[1]
        self.feature_index = np.arange(n_feat) if feature_index is None else feature_index
        self.gram = X.T @ X
        self.mean = rng.normal(0.0, np.sqrt(1.0 / n_feat), size=(K, n_feat))
        self.cov = np.repeat(np.eye(n_feat)[None], K, axis=0)
        self.logdet = np.zeros(K)
        self.delta = GammaQ.prior(hp.delta, K)
        self.gamma = GammaQ.prior(hp.gamma, n_feat)
        self.refresh()

    @property
    def n_features(self):
        return self.X.shape[1]

    @property
    def n_coef(self):
        return self.X.shape[1]

    def refresh(self):
        self.H = self.X @ self.mean.T

    def update(self, tau, target):
        """Optimal q(w_k) for every k given the residual target (N x K)."""
        g = self.gamma.mean
        rhs = tau * (self.X.T @ target)
        for k in range(self.mean.shape[0]):
            prec = tau * self.gram + np.diag(self.delta.mean[k] * g)
            cov, logdet = invert_precision(prec, f"W[{self.name}] factor {k}")
            self.cov[k] = cov
            self.logdet[k] = logdet
            self.mean[k] = cov @ rhs[:, k]
        self.refresh()

    def wsq(self):
        """E[w_kd^2], K x D."""
        return self.mean**2 + np.diagonal(self.cov, axis1=1, axis2=2)

    def factor_quadratic(self):
        """sum_d <gamma_d> E[w_kd^2] per factor."""
        return self.wsq() @ self.gamma.mean

    def feature_quadratic(self):
        """sum_k <delta_k> E[w_kd^2] per feature."""
        return self.delta.mean @ self.wsq()

    def feature_power(self, second_moment=False):
        w = self.wsq() if second_moment else self.mean**2
        return w.sum(axis=0)

    def factor_power(self, second_moment=False):
        w = self.wsq() if second_moment else self.mean**2
        return w.sum(axis=1)

    def projection_variance(self):
        """sum_k tr(X^T X Sigma_k): the variance part of E||X w_k||^2."""
        return float(np.einsum("ij,kji->", self.gram, self.cov))

    def entropy(self):
        k, d = self.mean.shape
        return 0.5 * k * d * LOG_2PI_E + 0.5 * float(np.sum(self.logdet))

    def implied_weights(self):
        return self.mean

    def keep_factors(self, mask):
        self.mean = self.mean[mask]
        self.cov = self.cov[mask]
        self.logdet = self.logdet[mask]
        self.delta = self.delta.keep(mask)
        self.refresh()

    def keep_features(self, mask):
        self.X = self.X[:, mask]
        self.feature_index = self.feature_index[mask]
        self.gram = self.gram[np.ix_(mask, mask)]
        self.mean = self.mean[:, mask]
        self.cov = self.cov[:, mask][:, :, mask]
        self.logdet = np.array([np.linalg.slogdet(c)[1] for c in self.cov])
        self.gamma = self.gamma.keep(mask)
        self.refresh()


class DualWeights:
    """q(A) over the relevance-vector coefficients, one Gaussian per latent factor.

    Implied feature weights are W = A^T Xrv. Coefficient directions in the
    null space of Xrv^T change nothing in the model (standardized columns
    always put the all-ones vector there), so A is kept in the row space of
    Xrv: A = U B with U an orthonormal basis of range(Xrv), and the Gaussian
    factors live on B. Only N x r and r x r matrices (r <= Nrv) are formed;
    no D x D array exists for a dual view.
    """

    dual = True
    RANK_TOL = 1e-10

    def __init__(self, index, name, X, rv_indices, K, rng, hp: HyperPriors, feature_index=None):
        self.index = index
        self.name = name
        self.rv_indices = np.asarray(rv_indices, dtype=int)
        n_feat = X.shape[1]
        self.feature_index = np.arange(n_feat) if feature_index is None else feature_index
        self._set_inputs(X, X[self.rv_indices])
        n_rv = self.rv_indices.size
        a0 = rng.normal(0.0, np.sqrt(1.0 / n_rv), size=(n_rv, K))
        self.mean = self.basis.T @ a0
        r = self.basis.shape[1]
        self.cov = np.repeat(np.eye(r)[None], K, axis=0)
        self.logdet = np.zeros(K)
        self.delta = GammaQ.prior(hp.delta, K)
        self.gamma = GammaQ.prior(hp.gamma, n_feat)
        self.refresh()

    def _set_inputs(self, X, Xrv):
        self.X = X
        self.Xrv = Xrv
        evals, evecs = np.linalg.eigh(Xrv @ Xrv.T)
        keep = evals > self.RANK_TOL * max(float(evals.max(initial=0.0)), 1e-300)
        self.basis = evecs[:, keep][:, ::-1]
        self.Xb = self.basis.T @ Xrv
        self.kern = X @ self.Xb.T
        self.kern_gram = self.kern.T @ self.kern

    @property
    def n_features(self):
        return self.X.shape[1]

    @property
    def n_coef(self):
        return self.Xb.shape[0]

    @property
    def A(self):
        """Mean of A, Nrv x K."""
        return self.basis @ self.mean

    @property
    def A_cov(self):
        """Covariances of the columns of A, K x Nrv x Nrv (rank r)."""
        return np.einsum("ia,kab,jb->kij", self.basis, self.cov, self.basis, optimize=True)

    def refresh(self):
        self.H = self.kern @ self.mean
        self.refresh_gamma()

    def refresh_gamma(self):
        self.gram_gamma = (self.Xb * self.gamma.mean) @ self.Xb.T

    def update(self, tau, target):
        rhs = tau * (self.kern.T @ target)
        for k in range(self.mean.shape[1]):
            prec = tau * self.kern_gram + self.delta.mean[k] * self.gram_gamma
            cov, logdet = invert_precision(prec, f"A[{self.name}] factor {k}")
            self.cov[k] = cov
            self.logdet[k] = logdet
            self.mean[:, k] = cov @ rhs[:, k]
        self.H = self.kern @ self.mean

    def factor_quadratic(self):
        g = self.gram_gamma
        quad = np.einsum("ik,ij,jk->k", self.mean, g, self.mean, optimize=True)
        return quad + np.einsum("kij,ji->k", self.cov, g)

    def feature_quadratic(self):
        d = self.delta.mean
        implied = self.Xb.T @ self.mean  # D x K
        pooled = np.einsum("k,kij->ij", d, self.cov)
        return (implied**2) @ d + np.sum(self.Xb * (pooled @ self.Xb), axis=0)

    def feature_power(self, second_moment=False):
        power = np.sum((self.Xb.T @ self.mean) ** 2, axis=1)
        if second_moment:
            pooled = self.cov.sum(axis=0)
            power = power + np.sum(self.Xb * (pooled @ self.Xb), axis=0)
        return power

    def factor_power(self, second_moment=False):
        power = np.sum((self.Xb.T @ self.mean) ** 2, axis=0)
        if second_moment:
            xx = self.Xb @ self.Xb.T
            power = power + np.einsum("kij,ji->k", self.cov, xx)
        return power

    def projection_variance(self):
        return float(np.einsum("ij,kji->", self.kern_gram, self.cov))

    def wsq(self):
        """E[w_kd^2] of the implied weights, K x D (costs K * r^2 * D)."""
        implied = (self.Xb.T @ self.mean).T
        var = np.stack([np.sum(self.Xb * (c @ self.Xb), axis=0) for c in self.cov])
        return implied**2 + var

    def entropy(self):
        r, k = self.mean.shape
        return 0.5 * k * r * LOG_2PI_E + 0.5 * float(np.sum(self.logdet))

    def implied_weights(self):
        return (self.Xb.T @ self.mean).T

    def keep_factors(self, mask):
        self.mean = self.mean[:, mask]
        self.cov = self.cov[mask]
        self.logdet = self.logdet[mask]
        self.delta = self.delta.keep(mask)
        self.refresh()

    def keep_features(self, mask):
        old = self.basis
        self._set_inputs(self.X[:, mask], self.Xrv[:, mask])
        # carry q(A) over to the (possibly smaller) new coefficient basis
        proj = self.basis.T @ old
        self.mean = proj @ self.mean
        self.cov = np.einsum("ia,kab,jb->kij", proj, self.cov, proj, optimize=True)
        self.logdet = np.array([np.linalg.slogdet(c)[1] for c in self.cov])
        self.feature_index = self.feature_index[mask]
        self.gamma = self.gamma.keep(mask)
        self.refresh()


# -- full model state ----------------------------------------------------------

@dataclass
class ModelState:
    """All variational factors plus the standardized training data they refer to."""

    views: list
    descriptors: list
    view_names: list
    feature_names: list
    n_original_features: list
    T: np.ndarray
    class_names: list
    Z_mean: np.ndarray
    Z_cov: np.ndarray
    Z_logdet: float
    V_mean: np.ndarray
    V_cov: np.ndarray
    V_logdet: float
    Y_mean: np.ndarray
    Y_var: np.ndarray
    xi: np.ndarray
    tau: GammaQ
    psi: GammaQ
    omega: GammaQ
    hp: HyperPriors = field(default_factory=HyperPriors)

    @property
    def K(self) -> int:
        return self.Z_mean.shape[1]

    @property
    def N(self) -> int:
        return self.T.shape[0]

    @property
    def C(self) -> int:
        return self.T.shape[1]

    def H_sum(self):
        out = np.zeros_like(self.Z_mean)
        for v in self.views:
            out += v.H
        return out

    def ZtZ(self):
        return second_moment(self.Z_mean, self.Z_cov, self.N)

    def VtV(self):
        return second_moment(self.V_mean, self.V_cov, self.C)

    def copy(self) -> "ModelState":
        import copy

        return copy.deepcopy(self)

    def check(self):
        """Raise NumericalBreakdown if any factor violates its invariants."""
        for name in ("tau", "psi", "omega"):
            getattr(self, name).check(name)
        for v in self.views:
            v.delta.check(f"delta[{v.name}]")
            v.gamma.check(f"gamma[{v.name}]")
            if v.delta.alpha.shape[0] != self.K:
                raise NumericalBreakdown(f"view {v.name}: factor count out of sync")
        if np.any(self.xi < 0):
            raise NumericalBreakdown("negative xi")


def init_state(dataset: MultiViewDataset, config) -> ModelState:
    """Standardize the training dataset, choose primal/dual per view and seed every factor.

    ``config`` is a FitConfig (or anything with ``k_init``, ``hyperpriors``,
    ``seed``, ``ratio_threshold``, ``rv_strategy``, ``rv_k``).
    """
    k = int(config.k_init)
    if k < 1:
        raise ValueError("k_init must be >= 1")
    check_training_targets(dataset.targets)
    hp = config.hyperpriors
    rng = np.random.default_rng(config.seed)
    n = dataset.n_samples
    T = dataset.targets.values.copy()
    C = T.shape[1]
    Z_mean = rng.standard_normal((n, k))

    views, descriptors = [], []
    all_rows = np.arange(n)
    for m, view in enumerate(dataset.views):
        std_view, scaler = standardize_fit_transform(view, all_rows)
        active = scaler.active.copy()
        X = std_view.values[:, active]
        feature_index = np.flatnonzero(active)
        if view.force_dual is not None:
            dual = bool(view.force_dual)
        else:
            dual = decide_width(n, max(1, X.shape[1]), config.ratio_threshold)
        rv = []
        if dual:
            strategy = view.rv_strategy or config.rv_strategy
            rv_k = view.rv_k if view.rv_k is not None else config.rv_k
            rv = select_relevance_vectors(n, strategy, rv_k, seed=config.seed + m)
        descriptors.append(ViewDescriptor(dual, rv, scaler, active.copy()))
        if X.shape[1] == 0:
            continue
        if dual:
            views.append(DualWeights(m, view.view_name, X, rv, k, rng, hp, feature_index))
        else:
            views.append(PrimalWeights(m, view.view_name, X, k, rng, hp, feature_index))
    if not views:
        raise NumericalBreakdown("no view has a non-constant feature")

    xi = np.ones((n, C))
    return ModelState(
        views=views,
        descriptors=descriptors,
        view_names=[v.view_name for v in dataset.views],
        feature_names=[list(v.feature_names) for v in dataset.views],
        n_original_features=[v.n_features for v in dataset.views],
        T=T,
        class_names=list(dataset.targets.class_names),
        Z_mean=Z_mean,
        Z_cov=np.eye(k),
        Z_logdet=0.0,
        V_mean=np.zeros((C, k)),
        V_cov=np.eye(k),
        V_logdet=0.0,
        Y_mean=2.0 * T - 1.0,
        Y_var=np.ones((n, C)),
        xi=xi,
        tau=GammaQ.prior(hp.tau),
        psi=GammaQ.prior(hp.psi),
        omega=GammaQ.prior(hp.omega, k),
        hp=hp,
    )
