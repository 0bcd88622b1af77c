"""Closed-form marginal statistics for multilevel count models.

Given a linear predictor and a design vector for the cluster random part,
every statistic follows from the marginal expectation ``mu_m`` and the
log-scale variances:

* level-3 component  ``mu_m**2 * (exp(sigma2_v) - 1)``
* level-2 component  ``mu_m**2 * exp(sigma2_v) * (exp(s2) - 1)``
* level-1 component  family specific, e.g. ``mu_m + mu_m**2 * exp(sigma2_v + s2) * alpha``
  for the NB2 model,

where ``s2`` is the cluster variance function at the design vector and
``sigma2_v`` is zero for two-level models.  The level-2 component does not
depend on the family; only the level-1 component does.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .data import Dataset, DataError
from .model import (
    ModelFamily,
    ModelSpec,
    RandomCoefficient,
    cluster_variance_function,
    cluster_variance_rows,
)

MAX_LOG_MEAN = 700.0

PROFILE_COLUMNS = (
    "expectation",
    "variance",
    "variance3",
    "variance2",
    "variance1",
    "vpc3",
    "vpc2",
    "vpc1",
)


@dataclass(frozen=True)
class ConditionalStats:
    mu_c: float
    omega_c: float


@dataclass(frozen=True)
class MarginalStats:
    """Marginal moments and their level decomposition for one covariate pattern.

    ``comp_l3`` is 0 and ``vpc3``/``vpc23`` are ``None`` for two-level models.
    """

    mu_m: float
    variance: float
    comp_l3: float
    comp_l2: float
    comp_l1: float
    vpc3: float | None
    vpc2: float
    vpc23: float | None
    vpc1: float
    three_level: bool = False

    @property
    def icc_same_covariates(self) -> float:
        """Correlation of two units in the same cluster with equal covariates.

        For three-level models this is the same-cluster correlation, i.e.
        ``vpc23``; see :attr:`icc3` for units sharing only a supercluster.
        """
        return self.vpc23 if self.three_level else self.vpc2

    @property
    def icc3(self) -> float | None:
        return self.vpc3

    @property
    def icc23(self) -> float | None:
        return self.vpc23

    def as_row(self) -> dict:
        return {
            "expectation": self.mu_m,
            "variance": self.variance,
            "variance3": self.comp_l3 if self.three_level else None,
            "variance2": self.comp_l2,
            "variance1": self.comp_l1,
            "vpc3": self.vpc3,
            "vpc2": self.vpc2,
            "vpc1": self.vpc1,
        }


def _check_log_mean(log_mu):
    if np.any(np.asarray(log_mu) > MAX_LOG_MEAN):
        raise OverflowError(f"range error: log mean exceeds {MAX_LOG_MEAN:g}")


def conditional_stats(family, eta: float, dispersion: float = 0.0) -> ConditionalStats:
    """Mean and variance of y given the realised random effects.

    ``eta`` already includes fixed part, offset and realised cluster effects;
    ``dispersion`` is alpha (NB2), delta (NB1) or sigma2_e (Poisson-lognormal).
    """
    family = ModelFamily(family)
    if not np.isfinite(eta):
        raise ValueError("eta must be finite")
    if family is ModelFamily.POISSON_LOGNORMAL:
        log_mu = eta + dispersion / 2
    else:
        log_mu = eta
    _check_log_mean(log_mu)
    mu = float(np.exp(log_mu))
    if family is ModelFamily.POISSON:
        omega = mu
    elif family is ModelFamily.NB2:
        omega = mu + mu * mu * dispersion
    elif family is ModelFamily.NB1:
        omega = mu * (1 + dispersion)
    else:
        omega = mu + mu * mu * np.expm1(dispersion)
    return ConditionalStats(mu_c=mu, omega_c=float(omega))


def _log_marginal_mean(spec: ModelSpec, eta_fixed, s2):
    log_mu = np.asarray(eta_fixed, dtype=float) + np.asarray(s2) / 2
    if spec.is_three_level:
        log_mu = log_mu + spec.sigma2_v / 2
    if spec.family is ModelFamily.POISSON_LOGNORMAL:
        log_mu = log_mu + spec.dispersion_value / 2
    _check_log_mean(log_mu)
    return log_mu


def marginal_expectation(spec: ModelSpec, eta_fixed: float, z=None) -> float:
    """Expected count averaging over all random effects.

    ``eta_fixed`` is x'beta plus any offset; ``z`` is the design vector of
    the random coefficients (ignored for a random intercept).
    """
    s2 = cluster_variance_function(spec.random, z)
    return float(np.exp(_log_marginal_mean(spec, eta_fixed, s2)))


def _components(spec: ModelSpec, mu_m, s2):
    mu_m = np.asarray(mu_m, dtype=float)
    s2 = np.asarray(s2, dtype=float)
    sigma2_v = spec.sigma2_v if spec.is_three_level else 0.0
    mu2 = mu_m * mu_m
    comp_l3 = mu2 * np.expm1(sigma2_v)
    comp_l2 = mu2 * np.exp(sigma2_v) * np.expm1(s2)
    disp = spec.dispersion_value
    family = spec.family
    if family is ModelFamily.POISSON or disp == 0:
        comp_l1 = mu_m
    elif family is ModelFamily.NB2:
        comp_l1 = mu_m + mu2 * np.exp(sigma2_v + s2) * disp
    elif family is ModelFamily.NB1:
        comp_l1 = mu_m * (1 + disp)
    else:
        comp_l1 = mu_m + mu2 * np.exp(sigma2_v + s2) * np.expm1(disp)
    return comp_l3, comp_l2, comp_l1


def variance_components(spec: ModelSpec, mu_m: float, z=None) -> tuple[float, float, float]:
    """Level-3, level-2 and level-1 parts of the marginal variance at ``mu_m``."""
    if not mu_m > 0:
        raise ValueError("mu_m must be positive")
    s2 = cluster_variance_function(spec.random, z)
    return tuple(float(c) for c in _components(spec, mu_m, s2))


def _assemble(spec: ModelSpec, eta_fixed, s2) -> dict:
    mu_m = np.exp(_log_marginal_mean(spec, eta_fixed, s2))
    comp_l3, comp_l2, comp_l1 = _components(spec, mu_m, s2)
    variance = comp_l3 + comp_l2 + comp_l1
    out = {
        "mu_m": mu_m,
        "variance": variance,
        "comp_l3": np.broadcast_to(comp_l3, np.shape(variance)),
        "comp_l2": comp_l2,
        "comp_l1": comp_l1,
        "vpc2": comp_l2 / variance,
        "vpc1": comp_l1 / variance,
    }
    if spec.is_three_level:
        out["vpc3"] = comp_l3 / variance
        out["vpc23"] = (comp_l3 + comp_l2) / variance
    return out


def marginal_stats(spec: ModelSpec, eta_fixed: float = None, z=None) -> MarginalStats:
    """All marginal statistics for one covariate pattern.

    ``eta_fixed`` defaults to the intercept (the reference unit).
    """
    if eta_fixed is None:
        eta_fixed = spec.fixed.intercept
    s2 = cluster_variance_function(spec.random, z)
    parts = _assemble(spec, float(eta_fixed), s2)
    return MarginalStats(
        mu_m=float(parts["mu_m"]),
        variance=float(parts["variance"]),
        comp_l3=float(parts["comp_l3"]),
        comp_l2=float(parts["comp_l2"]),
        comp_l1=float(parts["comp_l1"]),
        vpc3=float(parts["vpc3"]) if "vpc3" in parts else None,
        vpc2=float(parts["vpc2"]),
        vpc23=float(parts["vpc23"]) if "vpc23" in parts else None,
        vpc1=float(parts["vpc1"]),
        three_level=spec.is_three_level,
    )


def reference_row(spec: ModelSpec, **values: float) -> tuple[float, np.ndarray]:
    """Linear predictor and z vector for a unit with the named covariates set.

    Unnamed covariates are held at 0, so ``reference_row(spec)`` is the
    reference unit.
    """
    names = spec.fixed.covariate_names
    unknown = set(values) - set(names[1:])
    if unknown:
        raise KeyError(f"unknown covariate(s): {sorted(unknown)}")
    x = np.array([values.get(n, 0.0) for n in names[1:]], dtype=float)
    eta = float(spec.fixed.beta[0] + x @ spec.fixed.beta[1:])
    if isinstance(spec.random, RandomCoefficient):
        z = np.array([1.0] + [values.get(n, 0.0) for n in spec.random.z_columns[1:]])
    else:
        z = np.ones(1)
    return eta, z


@dataclass(frozen=True)
class FieldSummary:
    mean: float
    min: float
    q1: float
    median: float
    q3: float
    max: float


class Profile:
    """Per-observation marginal statistics plus a distributional summary."""

    def __init__(self, spec: ModelSpec, arrays: dict):
        self.three_level = spec.is_three_level
        self.arrays = arrays
        n = len(arrays["mu_m"])
        self.summary = None if n == 0 else {
            name: _summarize(values)
            for name, values in arrays.items()
            if name not in ("comp_l3", "vpc3", "vpc23") or self.three_level
        }

    def __len__(self):
        return len(self.arrays["mu_m"])

    def __getitem__(self, i) -> MarginalStats:
        a = self.arrays
        return MarginalStats(
            mu_m=float(a["mu_m"][i]),
            variance=float(a["variance"][i]),
            comp_l3=float(a["comp_l3"][i]),
            comp_l2=float(a["comp_l2"][i]),
            comp_l1=float(a["comp_l1"][i]),
            vpc3=float(a["vpc3"][i]) if self.three_level else None,
            vpc2=float(a["vpc2"][i]),
            vpc23=float(a["vpc23"][i]) if self.three_level else None,
            vpc1=float(a["vpc1"][i]),
            three_level=self.three_level,
        )

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def to_csv(self, path=None, digits: int = 9) -> str:
        """Write the profile with one row per observation; returns the text."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(PROFILE_COLUMNS)
        for stats in self:
            row = stats.as_row()
            writer.writerow(["" if row[c] is None else f"{row[c]:.{digits}g}" for c in PROFILE_COLUMNS])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
        return text


def _summarize(values) -> FieldSummary:
    q1, med, q3 = np.quantile(values, [0.25, 0.5, 0.75])
    return FieldSummary(
        mean=float(np.mean(values)),
        min=float(np.min(values)),
        q1=float(q1),
        median=float(med),
        q3=float(q3),
        max=float(np.max(values)),
    )


def stats_profile(spec: ModelSpec, dataset: Dataset) -> Profile:
    """Evaluate the marginal statistics at every observation of ``dataset``.

    The dataset must carry a numeric column for every non-intercept
    coefficient of ``spec`` (and for every random-slope column).
    """
    names = list(spec.fixed.covariate_names[1:])
    x = dataset.design(names)
    eta = spec.fixed.beta[0] + x @ spec.fixed.beta[1:] + dataset.offset_or_zero()
    if isinstance(spec.random, RandomCoefficient):
        z_names = list(spec.random.z_columns[1:])
        try:
            z_rest = dataset.design(z_names)
        except DataError as exc:
            raise DataError(f"random-slope column unresolvable: {exc}") from None
        z = np.column_stack([np.ones(dataset.n_obs), z_rest])
    else:
        z = np.ones((dataset.n_obs, 1))
    s2 = cluster_variance_rows(spec.random, z)
    parts = _assemble(spec, eta, s2)
    arrays = {k: np.asarray(v, dtype=float) for k, v in parts.items()}
    arrays["comp_l3"] = np.array(np.broadcast_to(arrays["comp_l3"], eta.shape))
    if not spec.is_three_level:
        arrays["vpc3"] = np.full(eta.shape, np.nan)
        arrays["vpc23"] = np.full(eta.shape, np.nan)
    return Profile(spec, arrays)


def incidence_rate_ratio(beta_k: float) -> float:
    """Multiplicative effect of a unit covariate change on the expected count."""
    if not np.isfinite(beta_k):
        raise ValueError("coefficient must be finite")
    return float(np.exp(beta_k))


__all__ = [
    "ConditionalStats",
    "MarginalStats",
    "Profile",
    "conditional_stats",
    "marginal_expectation",
    "variance_components",
    "marginal_stats",
    "reference_row",
    "stats_profile",
    "incidence_rate_ratio",
    "PROFILE_COLUMNS",
]
