"""Gaussian mixtures over feature codes: densities, EM fitting, sampling."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg
from scipy.special import logsumexp
from sklearn.base import BaseEstimator, DensityMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_codes
from .exceptions import ConfigurationError, NumericError, ShapeError, ValidationError
from .rng import TAG_EM, TAG_SAMPLE, RngStream, as_stream

COV_TYPES = ("diag", "full")
COLLAPSE_WEIGHT = 1e-8
_LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class GmmModel:
    """Mixture parameters.

    ``covariances`` is ``(K, M)`` for ``cov_type='diag'`` and ``(K, M, M)``
    for ``'full'``.
    """

    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    cov_type: str = "diag"
    ridge: float = 1e-6

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.covariances = np.asarray(self.covariances, dtype=np.float64)
        if self.cov_type not in COV_TYPES:
            raise ConfigurationError(f"cov_type must be one of {COV_TYPES}")
        K, M = self.means.shape
        expected = (K, M) if self.cov_type == "diag" else (K, M, M)
        if self.weights.shape != (K,) or self.covariances.shape != expected:
            raise ShapeError(
                f"inconsistent mixture shapes: weights {self.weights.shape}, "
                f"means {self.means.shape}, covariances {self.covariances.shape}"
            )

    @property
    def n_components(self):
        return self.means.shape[0]

    @property
    def n_features(self):
        return self.means.shape[1]

    def validate(self):
        """Check the simplex and positive-definiteness invariants."""
        w = self.weights
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValidationError(f"mixture weights must be a probability vector (sum={w.sum()!r})")
        for k in range(self.n_components):
            _factor(self.covariances[k], self.cov_type)
        return self


@dataclass
class EmOptions:
    max_iters: int = 500
    tol: float = 1e-6
    seed: int = 0
    init: str = "random_points"
    ridge: float = 1e-6

    def __post_init__(self):
        if not self.tol > 0 or self.max_iters < 1:
            raise ConfigurationError("EM needs tol > 0 and max_iters >= 1")
        if self.init != "random_points":
            raise ConfigurationError(f"unsupported init {self.init!r}")
        if self.ridge < 0:
            raise ConfigurationError("ridge must be >= 0")


def _factor(cov, cov_type):
    """Lower Cholesky factor (full) or the variance vector (diag)."""
    if cov_type == "diag":
        if np.any(~np.isfinite(cov)) or np.any(cov <= 0):
            raise NumericError("diagonal covariance has non-positive entries; increase the ridge")
        return cov
    try:
        return linalg.cholesky(cov, lower=True, check_finite=True)
    except (linalg.LinAlgError, ValueError) as exc:
        raise NumericError(f"covariance is not positive definite ({exc}); increase the ridge") from None


def _logpdf_rows(F, mu, cov, cov_type):
    M = F.shape[1]
    diff = F - mu
    if cov_type == "diag":
        var = _factor(cov, cov_type)
        maha = np.sum(diff * diff / var, axis=1)
        logdet = np.sum(np.log(var))
    else:
        L = _factor(cov, cov_type)
        z = linalg.solve_triangular(L, diff.T, lower=True)
        maha = np.sum(z * z, axis=0)
        logdet = 2.0 * np.sum(np.log(np.diag(L)))
    return -0.5 * (M * _LOG_2PI + logdet + maha)


def gaussian_logpdf(f, mu, Sigma, cov_type="full"):
    """Multivariate normal log-density.

    ``f`` may be a single vector ``(M,)`` (returns a float) or rows
    ``(N, M)`` (returns ``(N,)``). ``Sigma`` is ``(M, M)`` or, for
    ``cov_type='diag'``, the variance vector ``(M,)``. No explicit inverse
    is formed: the full case goes through a Cholesky factor.
    """
    f = np.asarray(f, dtype=np.float64)
    mu = np.atleast_1d(np.asarray(mu, dtype=np.float64))
    Sigma = np.asarray(Sigma, dtype=np.float64)
    if cov_type == "full":
        Sigma = np.atleast_2d(Sigma)
    else:
        Sigma = np.atleast_1d(Sigma)
    single = f.ndim <= 1
    F = f.reshape(1, -1) if single else f
    M = mu.shape[0]
    expected = (M,) if cov_type == "diag" else (M, M)
    if F.shape[1] != M or Sigma.shape != expected:
        raise ShapeError(f"dimension mismatch: f {F.shape}, mu {mu.shape}, Sigma {Sigma.shape}")
    out = _logpdf_rows(F, mu, Sigma, cov_type)
    return float(out[0]) if single else out


def component_logpdfs(F, model):
    """``(N, K)`` matrix of ``log alpha_k + log phi_k(f_n)``."""
    with np.errstate(divide="ignore"):
        logw = np.log(model.weights)
    cols = [
        _logpdf_rows(F, model.means[k], model.covariances[k], model.cov_type)
        for k in range(model.n_components)
    ]
    return np.stack(cols, axis=1) + logw


def gmm_logdensity(f, model):
    """Mixture log-density via log-sum-exp; float for one vector, array for rows."""
    f = np.asarray(f, dtype=np.float64)
    single = f.ndim <= 1
    F = f.reshape(1, -1) if single else f
    if F.shape[1] != model.n_features:
        raise ShapeError(f"expected {model.n_features}-dimensional features, got {F.shape[1]}")
    out = logsumexp(component_logpdfs(F, model), axis=1)
    return float(out[0]) if single else out


def _global_cov(X, cov_type, ridge):
    diff = X - X.mean(axis=0)
    if cov_type == "diag":
        return np.mean(diff * diff, axis=0) + ridge
    return diff.T @ diff / X.shape[0] + ridge * np.eye(X.shape[1])


def _m_step(X, resp, cov_type, ridge):
    N, M = X.shape
    nk = resp.sum(axis=0)
    weights = nk / N
    safe = np.maximum(nk, np.finfo(np.float64).tiny)
    means = (resp.T @ X) / safe[:, None]
    K = resp.shape[1]
    if cov_type == "diag":
        covs = np.empty((K, M))
        for k in range(K):
            d = X - means[k]
            covs[k] = (resp[:, k] @ (d * d)) / safe[k] + ridge
    else:
        covs = np.empty((K, M, M))
        eye = np.eye(M)
        for k in range(K):
            d = X - means[k]
            covs[k] = (d.T * resp[:, k]) @ d / safe[k] + ridge * eye
    weights = weights / weights.sum()
    return weights, means, covs


def em_fit(features, K=3, opts=None, cov_type="diag"):
    """Fit a K-component mixture by expectation-maximization.

    Initialization: means at K distinct random data points, every
    covariance equal to the (ridged) global covariance, uniform weights.
    Each iteration is an M-step on the current responsibilities followed by
    an E-step; the mean log-likelihood after each iteration is appended to
    the trace and iteration stops once it changes by less than ``opts.tol``.

    Returns
    -------
    model : GmmModel
    trace : list of float
    """
    opts = EmOptions() if opts is None else opts
    if cov_type not in COV_TYPES:
        raise ConfigurationError(f"cov_type must be one of {COV_TYPES}")
    X = check_codes(features, name="features")
    N = X.shape[0]
    if N <= K:
        raise ValidationError(f"need more samples than components (N={N}, K={K})")
    gen = RngStream(opts.seed, TAG_EM).generator
    init_cov = _global_cov(X, cov_type, opts.ridge)
    idx = gen.choice(N, size=K, replace=False)
    model = GmmModel(
        weights=np.full(K, 1.0 / K),
        means=X[idx].copy(),
        covariances=np.repeat(init_cov[None], K, axis=0),
        cov_type=cov_type,
        ridge=opts.ridge,
    )
    log_prob = component_logpdfs(X, model)
    ll = logsumexp(log_prob, axis=1)
    resp = np.exp(log_prob - ll[:, None])
    prev = float(ll.mean())
    trace = []
    for _ in range(opts.max_iters):
        weights, means, covs = _m_step(X, resp, cov_type, opts.ridge)
        collapsed = np.flatnonzero(weights < COLLAPSE_WEIGHT)
        if collapsed.size:
            warnings.warn(
                f"EM: {collapsed.size} mixture component(s) collapsed; reinitializing from data points",
                RuntimeWarning,
                stacklevel=2,
            )
            for k in collapsed:
                means[k] = X[gen.integers(N)]
                covs[k] = init_cov
                weights[k] = 1.0 / K
            weights = weights / weights.sum()
        model = GmmModel(weights, means, covs, cov_type, opts.ridge)
        log_prob = component_logpdfs(X, model)
        ll = logsumexp(log_prob, axis=1)
        resp = np.exp(log_prob - ll[:, None])
        cur = float(ll.mean())
        trace.append(cur)
        if abs(cur - prev) < opts.tol:
            break
        prev = cur
    return model, trace


def gmm_sample(model, n, rng):
    """Draw ``n`` raw feature vectors ``(n, M)``.

    Component indices are drawn first, then one standard-normal matrix is
    transformed per component, so output depends only on the stream.
    """
    if n < 1:
        raise ValidationError(f"n must be >= 1, got {n}")
    gen = rng.generator
    comps = gen.choice(model.n_components, size=n, p=model.weights)
    z = gen.standard_normal((n, model.n_features))
    out = np.empty_like(z)
    for k in range(model.n_components):
        sel = comps == k
        if not np.any(sel):
            continue
        if model.cov_type == "diag":
            out[sel] = model.means[k] + z[sel] * np.sqrt(model.covariances[k])
        else:
            L = _factor(model.covariances[k], "full")
            out[sel] = model.means[k] + z[sel] @ L.T
    return out


def match_components(estimated_means, true_means):
    """Greedy nearest-mean assignment; returns ``perm`` with
    ``estimated_means[perm[i]]`` matched to ``true_means[i]``."""
    est = np.asarray(estimated_means)
    true = np.asarray(true_means)
    d = np.linalg.norm(true[:, None, :] - est[None, :, :], axis=2)
    perm = np.full(true.shape[0], -1)
    used_t, used_e = set(), set()
    for flat in np.argsort(d, axis=None):
        i, j = np.unravel_index(flat, d.shape)
        if i in used_t or j in used_e:
            continue
        perm[i] = j
        used_t.add(i)
        used_e.add(j)
    return perm


class GaussianMixtureEM(DensityMixin, BaseEstimator):
    """Scikit-learn style mixture fitted with :func:`em_fit`.

    Parameters
    ----------
    n_components : int, default=3
    covariance_type : {'diag', 'full'}, default='diag'
    max_iter : int, default=500
    tol : float, default=1e-6
    ridge : float, default=1e-6
    random_state : int, default=0
    """

    def __init__(self, n_components=3, covariance_type="diag", max_iter=500, tol=1e-6, ridge=1e-6, random_state=0):
        self.n_components = n_components
        self.covariance_type = covariance_type
        self.max_iter = max_iter
        self.tol = tol
        self.ridge = ridge
        self.random_state = random_state

    def fit(self, X, y=None):
        opts = EmOptions(max_iters=self.max_iter, tol=self.tol, seed=self.random_state, ridge=self.ridge)
        self.model_, self.log_likelihood_trace_ = em_fit(X, self.n_components, opts, self.covariance_type)
        self.n_iter_ = len(self.log_likelihood_trace_)
        self.n_features_in_ = self.model_.n_features
        return self

    @classmethod
    def from_model(cls, model):
        est = cls(n_components=model.n_components, covariance_type=model.cov_type, ridge=model.ridge)
        est.model_ = model
        est.log_likelihood_trace_ = []
        est.n_iter_ = 0
        est.n_features_in_ = model.n_features
        return est

    @property
    def weights_(self):
        return self.model_.weights

    @property
    def means_(self):
        return self.model_.means

    @property
    def covariances_(self):
        return self.model_.covariances

    def score_samples(self, X):
        check_is_fitted(self, "model_")
        return gmm_logdensity(check_codes(X, self.model_.n_features), self.model_)

    def score(self, X, y=None):
        return float(np.mean(self.score_samples(X)))

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        lp = component_logpdfs(check_codes(X, self.model_.n_features), self.model_)
        return np.exp(lp - logsumexp(lp, axis=1, keepdims=True))

    def predict(self, X):
        return np.argmax(self.predict_proba(X), axis=1)

    def sample(self, n_samples=1, random_state=None):
        check_is_fitted(self, "model_")
        return gmm_sample(self.model_, n_samples, as_stream(random_state, TAG_SAMPLE))
