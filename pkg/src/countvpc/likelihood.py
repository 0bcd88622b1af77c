"""Marginal likelihood of two-level random-intercept count models.

The cluster likelihood

    L_j = integral of prod_i p(y_ij | exp(eta_ij + u)) * N(u; 0, sigma2_u) du

is evaluated by adaptive Gauss-Hermite quadrature: the log integrand is
maximised per cluster by a safeguarded Newton search, and the Hermite nodes
are centred at the mode and scaled by the inverse square root of the
curvature there.  All clusters are processed together on flat arrays, with
per-cluster reductions done by ``np.bincount`` (which sums rows in order,
so results do not depend on how work is scheduled).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import digamma, gammaln, logsumexp

LOG_2PI = np.log(2 * np.pi)
ALPHA_POISSON = 1e-12
# Below this alpha the log-gamma differences cancel badly; use a running sum.
_ALPHA_SERIES = 1e-3


def poisson_logpmf(y, mu):
    """log P(Y = y) for Y ~ Poisson(mu)."""
    y = np.asarray(y)
    mu = np.asarray(mu, dtype=float)
    if np.any(mu <= 0):
        raise ValueError("mu must be positive")
    out = y * np.log(mu) - mu - gammaln(y + 1.0)
    return out if out.ndim else float(out)


def _log_rising(y, alpha):
    """sum_{k<y} log1p(alpha * k), i.e. lgamma(y + 1/a) - lgamma(1/a) + y log a."""
    y = np.asarray(y)
    if alpha >= _ALPHA_SERIES or y.size == 0:
        r = 1.0 / alpha
        return gammaln(y + r) - gammaln(r) + y * np.log(alpha)
    table = np.concatenate(([0.0], np.cumsum(np.log1p(alpha * np.arange(int(y.max()))))))
    return table[y]


def _dlog_rising_dlogalpha(y, alpha):
    """Derivative of :func:`_log_rising` with respect to log(alpha)."""
    y = np.asarray(y)
    if alpha >= _ALPHA_SERIES or y.size == 0:
        r = 1.0 / alpha
        return y - (digamma(y + r) - digamma(r)) * r
    k = alpha * np.arange(int(y.max()))
    table = np.concatenate(([0.0], np.cumsum(k / (1 + k))))
    return table[y]


def nb2_logpmf(y, mu, alpha):
    """log P(Y = y) for the mean-dispersion negative binomial.

    Mean ``mu`` and variance ``mu + alpha * mu**2``; reduces to the Poisson
    when ``alpha <= 1e-12``.
    """
    y = np.asarray(y)
    mu = np.asarray(mu, dtype=float)
    if np.any(mu <= 0):
        raise ValueError("mu must be positive")
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    if alpha <= ALPHA_POISSON:
        return poisson_logpmf(y, mu)
    out = (
        _log_rising(y, alpha)
        - gammaln(y + 1.0)
        + y * np.log(mu)
        - (y + 1.0 / alpha) * np.log1p(alpha * mu)
    )
    return out if out.ndim else float(out)


def _log1p_gap(x):
    """(log1p(x) - x / (1 + x)) / x, accurate for small x."""
    x = np.asarray(x, dtype=float)
    small = x < 1e-3
    xs = np.where(small, 1.0, x)
    exact = (np.log1p(xs) - xs / (1 + xs)) / xs
    series = x / 2 - 2 * x**2 / 3 + 3 * x**3 / 4
    return np.where(small, series, exact)


class ClusteredCounts:
    """Flat arrays for a two-level dataset, ready for likelihood evaluation.

    ``x`` includes the intercept column.  Cluster codes must run 0..J-1.
    """

    def __init__(self, y, x, cluster, offset=None, n_clusters=None):
        self.y = np.asarray(y, dtype=np.int64)
        self.x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.x.shape[0] != self.y.size:
            self.x = self.x.reshape(self.y.size, -1)
        self.cluster = np.asarray(cluster, dtype=np.int64)
        self.offset = np.zeros(self.y.size) if offset is None else np.asarray(offset, float)
        self.n_clusters = int(n_clusters if n_clusters is not None else self.cluster.max() + 1)
        self.lgamma_y1 = gammaln(self.y + 1.0)
        self.y_float = self.y.astype(float)

    @classmethod
    def from_dataset(cls, dataset, covariate_names=()):
        x = np.column_stack([np.ones(dataset.n_obs), dataset.design(list(covariate_names))])
        return cls(dataset.y, x, dataset.cluster, dataset.offset, dataset.n_clusters)

    @property
    def n_params_fixed(self) -> int:
        return self.x.shape[1]

    def csum(self, values):
        """Per-cluster sums of a row vector (or of each column of a matrix)."""
        if values.ndim == 1:
            return np.bincount(self.cluster, weights=values, minlength=self.n_clusters)
        return np.stack(
            [np.bincount(self.cluster, weights=values[:, k], minlength=self.n_clusters)
             for k in range(values.shape[1])],
            axis=1,
        )


def _row_terms(data: ClusteredCounts, eta, alpha, derivs=True):
    """Row log-likelihood (without constants) and its eta derivatives."""
    mu = np.exp(eta)
    y = data.y_float if eta.ndim == 1 else data.y_float[:, None]
    if alpha <= ALPHA_POISSON:
        logp = y * eta - mu
        if not derivs:
            return logp
        return logp, y - mu, -mu
    x = alpha * mu
    logp = y * eta - (y + 1.0 / alpha) * np.log1p(x)
    if not derivs:
        return logp
    d1 = (y - mu) / (1 + x)
    d2 = -mu * (1 + alpha * y) / (1 + x) ** 2
    return logp, d1, d2


def _row_constant(data: ClusteredCounts, alpha):
    if alpha <= ALPHA_POISSON:
        return -data.lgamma_y1
    return _log_rising(data.y, alpha) - data.lgamma_y1


@dataclass
class QuadratureResult:
    loglik: np.ndarray  # per cluster
    nodes: np.ndarray | None  # (J, K) random-effect values at the nodes
    weights: np.ndarray | None  # (J, K) normalised posterior weights
    mode: np.ndarray
    scale: np.ndarray
    n_fallback: int = 0

    def posterior_mean(self) -> np.ndarray:
        if self.nodes is None:
            return np.zeros_like(self.loglik)
        return np.sum(self.weights * self.nodes, axis=1)


def _find_modes(data, eta_fixed, sigma2_u, alpha, const_j, max_iter=100, tol=1e-10):
    """Safeguarded Newton maximisation of each cluster's log integrand."""
    J = data.n_clusters
    u = np.zeros(J)

    def h_at(u_vec):
        logp = _row_terms(data, eta_fixed + u_vec[data.cluster], alpha, derivs=False)
        return data.csum(logp) + const_j - u_vec**2 / (2 * sigma2_u)

    h = h_at(u)
    active = np.ones(J, dtype=bool)
    for _ in range(max_iter):
        _, d1, d2 = _row_terms(data, eta_fixed + u[data.cluster], alpha)
        g = data.csum(d1) - u / sigma2_u
        c = 1.0 / sigma2_u - data.csum(d2)
        step = np.where(active, np.clip(g / c, -2.0, 2.0), 0.0)
        t = np.ones(J)
        for _ in range(50):
            trial = u + t * step
            h_trial = h_at(trial)
            ok = h_trial >= h - 1e-13 * np.abs(h)
            if np.all(ok | ~active):
                break
            t = np.where(ok, t, t / 2)
        take = active & ok
        u = np.where(take, trial, u)
        h = np.where(take, h_trial, h)
        active &= ~(np.abs(t * step) <= tol * (1 + np.abs(u)))
        if not active.any():
            break
    _, _, d2 = _row_terms(data, eta_fixed + u[data.cluster], alpha)
    curvature = 1.0 / sigma2_u - data.csum(d2)
    return u, curvature, active


def adaptive_quadrature(data: ClusteredCounts, beta, sigma2_u, alpha=0.0, n_nodes=7,
                        adaptive=True) -> QuadratureResult:
    """Per-cluster log marginal likelihood by (adaptive) Gauss-Hermite quadrature."""
    if sigma2_u < 0:
        raise ValueError("sigma2_u must be nonnegative")
    eta_fixed = data.x @ np.asarray(beta, float) + data.offset
    const_rows = _row_constant(data, alpha)
    const_j = data.csum(const_rows)
    if sigma2_u == 0:
        logp = _row_terms(data, eta_fixed, alpha, derivs=False)
        ll = data.csum(logp) + const_j
        zeros = np.zeros(data.n_clusters)
        return QuadratureResult(ll, None, None, zeros, zeros)

    sigma = np.sqrt(sigma2_u)
    n_fallback = 0
    if adaptive:
        mode, curvature, failed = _find_modes(data, eta_fixed, sigma2_u, alpha, const_j)
        scale = 1.0 / np.sqrt(curvature)
        n_fallback = int(failed.sum())
        if n_fallback:
            mode = np.where(failed, 0.0, mode)
            scale = np.where(failed, sigma, scale)
    else:
        mode = np.zeros(data.n_clusters)
        scale = np.full(data.n_clusters, sigma)

    x_k, w_k = np.polynomial.hermite.hermgauss(n_nodes)
    nodes = mode[:, None] + np.sqrt(2.0) * scale[:, None] * x_k[None, :]  # (J, K)
    eta = eta_fixed[:, None] + nodes[data.cluster]  # (N, K)
    logp = _row_terms(data, eta, alpha, derivs=False)
    h = data.csum(logp) + const_j[:, None]
    h += -nodes**2 / (2 * sigma2_u) - 0.5 * (LOG_2PI + np.log(sigma2_u))
    terms = np.log(w_k)[None, :] + x_k[None, :] ** 2 + h
    ll = np.log(np.sqrt(2.0) * scale) + logsumexp(terms, axis=1)
    weights = np.exp(terms - logsumexp(terms, axis=1, keepdims=True))
    return QuadratureResult(ll, nodes, weights, mode, scale, n_fallback)


def cluster_loglik(y, x, beta, sigma2_u, alpha=0.0, offset=None, n_nodes=7) -> float:
    """Log marginal likelihood of a single cluster.

    ``x`` holds the rows' covariates without the intercept column (``None``
    for an intercept-only model); ``beta[0]`` is the intercept.
    """
    y = np.asarray(y)
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    covs = np.empty((y.size, 0)) if x is None else np.asarray(x, float).reshape(y.size, beta.size - 1)
    x = np.column_stack([np.ones(y.size), covs])
    data = ClusteredCounts(y, x, np.zeros(y.size, dtype=np.int64), offset, 1)
    return float(adaptive_quadrature(data, beta, sigma2_u, alpha, n_nodes).loglik[0])


def loglik_and_grad(data: ClusteredCounts, theta, family_nb2: bool, n_nodes=7,
                    fixed_alpha=None):
    """Total log-likelihood and its gradient on the transformed scale.

    ``theta = (beta..., log sigma2_u[, log alpha])``; ``log alpha`` is only
    present when the family is NB2 and alpha is not held fixed.  The
    gradient differentiates the quadrature rule with the nodes held where
    the adaptive step placed them.
    """
    p = data.n_params_fixed
    beta = theta[:p]
    sigma2_u = float(np.exp(theta[p]))
    if family_nb2:
        alpha = float(np.exp(theta[p + 1])) if fixed_alpha is None else float(fixed_alpha)
    else:
        alpha = 0.0
    q = adaptive_quadrature(data, beta, sigma2_u, alpha, n_nodes)
    eta_fixed = data.x @ beta + data.offset
    wrow = q.weights[data.cluster]  # (N, K)
    eta = eta_fixed[:, None] + q.nodes[data.cluster]
    mu = np.exp(eta)
    y = data.y_float[:, None]
    if alpha <= ALPHA_POISSON:
        d1 = y - mu
    else:
        d1 = (y - mu) / (1 + alpha * mu)
    grad = np.empty(theta.size)
    grad[:p] = data.x.T @ np.sum(wrow * d1, axis=1)
    grad[p] = np.sum(q.weights * (q.nodes**2 / (2 * sigma2_u) - 0.5))
    if family_nb2 and fixed_alpha is None:
        xa = alpha * mu
        dla = mu * _log1p_gap(xa) - y * xa / (1 + xa)
        grad[p + 1] = np.sum(wrow * dla) + np.sum(_dlog_rising_dlogalpha(data.y, alpha))
    return float(np.sum(q.loglik)), grad, q
