"""Maximum-likelihood fitting of two-level random-intercept count models.

Poisson and NB2 models are fitted by maximising the adaptive-quadrature
marginal likelihood over ``(beta, log sigma2_u, log alpha)``.  Working on
the log scale keeps the variance parameters positive; a parameter that
runs below ``log(1e-8)`` is reported as sitting on the boundary.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, stats

from .data import Dataset, DataError
from .likelihood import ClusteredCounts, adaptive_quadrature, loglik_and_grad
from .model import Alpha, FixedEffects, ModelFamily, ModelSpec, RandomIntercept

logger = logging.getLogger(__name__)

BOUNDARY = 1e-8
_LOG_FLOOR = np.log(1e-12)
_LOG_CEIL = np.log(1e4)


class ConvergenceError(RuntimeError):
    pass


@dataclass
class FitOptions:
    n_quad_nodes: int = 7
    max_iterations: int = 500
    tol: float = 1e-8
    gtol: float = 1e-5
    fixed_alpha: float | None = None
    fd_step: float = 1e-4

    def __post_init__(self):
        if self.n_quad_nodes < 1:
            raise ValueError("n_quad_nodes must be at least 1")
        if self.tol <= 0 or self.gtol <= 0:
            raise ValueError("tolerances must be positive")


@dataclass
class FitResult:
    family: ModelFamily
    covariate_names: tuple[str, ...]
    beta: np.ndarray
    sigma2_u: float
    alpha: float | None
    se_beta: np.ndarray
    se_sigma2_u: float
    se_alpha: float | None
    log_likelihood: float
    converged: bool
    iterations: int
    n_quad_nodes: int
    u_hat: np.ndarray = field(repr=False, default=None)
    cluster_labels: np.ndarray = field(repr=False, default=None)
    boundary: tuple[str, ...] = ()
    theta: np.ndarray = field(repr=False, default=None)
    fixed_alpha: bool = False

    @property
    def deviance(self) -> float:
        return -2.0 * self.log_likelihood

    def to_spec(self) -> ModelSpec:
        disp = Alpha(self.alpha) if self.family is ModelFamily.NB2 else None
        return ModelSpec(
            family=self.family,
            fixed=FixedEffects(self.beta, self.covariate_names),
            random=RandomIntercept(self.sigma2_u),
            dispersion=disp,
        )

    def to_dict(self) -> dict:
        """Parameter-file document plus an ``inference`` block."""
        doc = self.to_spec().to_dict()
        se = {"beta": [float(s) for s in self.se_beta], "sigma2_u": float(self.se_sigma2_u)}
        if self.alpha is not None:
            se["alpha"] = None if self.se_alpha is None else float(self.se_alpha)
        doc["inference"] = {
            "se": se,
            "log_likelihood": self.log_likelihood,
            "deviance": self.deviance,
            "converged": self.converged,
            "iterations": self.iterations,
            "nodes": self.n_quad_nodes,
            "boundary": list(self.boundary),
        }
        return doc

    def estimates(self) -> dict:
        out = dict(zip(self.covariate_names, map(float, self.beta)))
        out["sigma2_u"] = self.sigma2_u
        if self.alpha is not None:
            out["alpha"] = self.alpha
        return out

    def standard_errors(self) -> dict:
        out = dict(zip(self.covariate_names, map(float, self.se_beta)))
        out["sigma2_u"] = self.se_sigma2_u
        if self.alpha is not None:
            out["alpha"] = self.se_alpha
        return out


def poisson_irls(x, y, offset=None, max_iter=100, tol=1e-10) -> np.ndarray:
    """Fixed-effects Poisson regression by iteratively reweighted least squares."""
    y = np.asarray(y, float)
    offset = np.zeros(y.size) if offset is None else offset
    beta = np.zeros(x.shape[1])
    beta[0] = np.log(max(y.mean(), 1e-8)) - offset.mean()
    for _ in range(max_iter):
        eta = x @ beta + offset
        if np.any(eta > 700):
            raise DataError("overflow in starting-value regression (possible separation)")
        mu = np.exp(eta)
        z = eta - offset + (y - mu) / mu
        xw = x * mu[:, None]
        try:
            new = np.linalg.solve(x.T @ xw, xw.T @ z)
        except np.linalg.LinAlgError:
            raise DataError("singular design in starting-value regression") from None
        if np.max(np.abs(new - beta)) < tol * (1 + np.max(np.abs(beta))):
            return new
        beta = new
    return beta


def starting_values(data: ClusteredCounts, nb2: bool) -> np.ndarray:
    beta = poisson_irls(data.x, data.y, data.offset)
    theta = [*beta, np.log(0.1)]
    if nb2:
        mu = np.exp(data.x @ beta + data.offset)
        alpha = np.sum((data.y - mu) ** 2 - mu) / np.sum(mu**2)
        theta.append(np.log(max(alpha, 0.01)))
    return np.array(theta, dtype=float)


def _hessian(fun_grad, theta, rel_step, free):
    """Central-difference Hessian of the log-likelihood from its gradient."""
    k = theta.size
    h = np.zeros((k, k))
    for i in np.flatnonzero(free):
        step = rel_step * max(1.0, abs(theta[i]))
        tp, tm = theta.copy(), theta.copy()
        tp[i] += step
        tm[i] -= step
        h[i] = (fun_grad(tp)[1] - fun_grad(tm)[1]) / (2 * step)
    h = 0.5 * (h + h.T)
    return h


def fit_ml(dataset: Dataset, family="nb2", options: FitOptions | None = None,
           covariates=None) -> FitResult:
    """Fit a two-level random-intercept Poisson or NB2 model.

    ``covariates`` names the numeric columns entering the fixed part
    (default: all numeric covariates of ``dataset``); an intercept is always
    included.  Returns a :class:`FitResult` with ``converged=False`` rather
    than raising when the optimiser stops early.
    """
    options = options or FitOptions()
    family = ModelFamily(family)
    if family not in (ModelFamily.POISSON, ModelFamily.NB2):
        raise ValueError(f"fitting is available for poisson and nb2, not {family.value}")
    if dataset.supercluster is not None and dataset.n_superclusters > 1:
        logger.info("ignoring supercluster ids: only two-level models are fitted")
    names = list(dataset.covariate_names if covariates is None else covariates)
    data = ClusteredCounts.from_dataset(dataset, names)
    nb2 = family is ModelFamily.NB2
    fixed_alpha = options.fixed_alpha if nb2 else None
    estimate_alpha = nb2 and fixed_alpha is None
    n_obs = data.y.size

    def fun_grad(theta):
        ll, grad, _ = loglik_and_grad(data, theta, nb2, options.n_quad_nodes, fixed_alpha)
        return ll, grad

    def objective(theta):
        ll, grad = fun_grad(theta)
        if not np.isfinite(ll):
            return np.inf, np.zeros_like(theta)
        return -ll / n_obs, -grad / n_obs

    theta0 = starting_values(data, estimate_alpha)
    p = data.n_params_fixed
    bounds = [(None, None)] * p + [(_LOG_FLOOR, _LOG_CEIL)] * (theta0.size - p)
    res = optimize.minimize(
        objective,
        theta0,
        jac=True,
        method="L-BFGS-B",
        bounds=bounds,
        options={
            "maxiter": options.max_iterations,
            "ftol": options.tol,
            "gtol": options.gtol / n_obs,
            "maxcor": 20,
        },
    )
    theta = res.x
    iterations = int(res.nit)

    on_boundary = np.zeros(theta.size, dtype=bool)
    on_boundary[p:] = theta[p:] < np.log(BOUNDARY)
    free = ~on_boundary

    # Newton polish on the free parameters; also yields the information matrix.
    ll, grad = fun_grad(theta)
    hess = _hessian(fun_grad, theta, options.fd_step, free)
    for _ in range(10):
        g_free = grad[free]
        if np.max(np.abs(g_free), initial=0.0) <= options.gtol:
            break
        h_free = hess[np.ix_(free, free)]
        try:
            step = np.linalg.solve(h_free, -g_free)
        except np.linalg.LinAlgError:
            break
        if not np.all(np.linalg.eigvalsh(h_free) < 0):
            break
        t = 1.0
        while t > 1e-4:
            trial = theta.copy()
            trial[free] += t * step
            ll_trial, grad_trial = fun_grad(trial)
            if np.isfinite(ll_trial) and ll_trial >= ll - 1e-10 * abs(ll):
                break
            t /= 2
        else:
            break
        theta, ll, grad = trial, ll_trial, grad_trial
        iterations += 1
        hess = _hessian(fun_grad, theta, options.fd_step, free)

    g_max = np.max(np.abs(grad[free]), initial=0.0)
    converged = bool(np.isfinite(ll) and (g_max <= options.gtol or res.success))
    if not converged:
        logger.warning("optimiser stopped without convergence: %s", res.message)

    cov = np.full((theta.size, theta.size), np.nan)
    h_free = hess[np.ix_(free, free)]
    try:
        cov[np.ix_(free, free)] = np.linalg.inv(-h_free)
    except np.linalg.LinAlgError:
        pass
    se_theta = np.sqrt(np.where(np.diag(cov) >= 0, np.diag(cov), np.nan))

    beta = theta[:p]
    sigma2_u = float(np.exp(theta[p]))
    alpha = None
    se_alpha = None
    if nb2:
        alpha = float(np.exp(theta[p + 1])) if estimate_alpha else float(fixed_alpha)
        se_alpha = float(alpha * se_theta[p + 1]) if estimate_alpha else None
    boundary = []
    if on_boundary[p]:
        boundary.append("sigma2_u")
    if estimate_alpha and on_boundary[p + 1]:
        boundary.append("alpha")

    quad = adaptive_quadrature(data, beta, sigma2_u, alpha or 0.0, options.n_quad_nodes)
    return FitResult(
        family=family,
        covariate_names=("_cons", *names),
        beta=beta,
        sigma2_u=sigma2_u,
        alpha=alpha,
        se_beta=se_theta[:p],
        se_sigma2_u=float(sigma2_u * se_theta[p]),
        se_alpha=se_alpha,
        log_likelihood=float(np.sum(quad.loglik)),
        converged=converged,
        iterations=iterations,
        n_quad_nodes=options.n_quad_nodes,
        u_hat=quad.posterior_mean(),
        cluster_labels=dataset.cluster_labels,
        boundary=tuple(boundary),
        theta=theta,
        fixed_alpha=nb2 and not estimate_alpha,
    )


def total_loglik(dataset: Dataset, spec: ModelSpec, n_nodes: int = 7) -> float:
    """Log-likelihood of ``dataset`` under a two-level random-intercept spec."""
    data = ClusteredCounts.from_dataset(dataset, spec.fixed.covariate_names[1:])
    q = adaptive_quadrature(data, spec.fixed.beta, spec.random.sigma2_u,
                            spec.dispersion_value, n_nodes)
    return float(np.sum(q.loglik))


def predict_random_effects(dataset: Dataset, fit: FitResult) -> np.ndarray:
    """Posterior means E(u_j | y_j) at the fitted parameters, one per cluster."""
    if not fit.converged:
        raise ConvergenceError("random effects are predicted from converged fits only")
    data = ClusteredCounts.from_dataset(dataset, fit.covariate_names[1:])
    q = adaptive_quadrature(data, fit.beta, fit.sigma2_u, fit.alpha or 0.0, fit.n_quad_nodes)
    return q.posterior_mean()


@dataclass(frozen=True)
class LRTest:
    statistic: float
    df: int
    p_value: float
    boundary_caveat: bool

    def __str__(self):
        note = " (conservative: tested parameter on the boundary)" if self.boundary_caveat else ""
        return f"LR chi2({self.df}) = {self.statistic:.2f}, p = {self.p_value:.4g}{note}"


def lr_test(loglik_null: float, loglik_alt: float, df: int, variance_parameter=False) -> LRTest:
    """Likelihood-ratio test with a naive chi-squared reference distribution.

    When the restriction sets a variance to zero the chi-squared p-value is
    conservative; ``variance_parameter=True`` records that caveat.
    """
    if df < 1:
        raise ValueError("df must be at least 1")
    if loglik_alt < loglik_null - 1e-6:
        raise ValueError("alternative log-likelihood is below the null")
    statistic = max(0.0, 2.0 * (loglik_alt - loglik_null))
    return LRTest(statistic, int(df), float(stats.chi2.sf(statistic, df)), bool(variance_parameter))


def lr_test_statistic(statistic: float, df: int, variance_parameter=False) -> LRTest:
    return lr_test(0.0, statistic / 2.0, df, variance_parameter)
