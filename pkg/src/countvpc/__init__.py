"""Variance partitioning for multilevel Poisson and negative binomial models."""

from .data import Dataset, DataError, Schema, CategoricalSpec, expand_categoricals, group_summary, load_csv, write_csv
from .model import (
    Alpha,
    Delta,
    FixedEffects,
    LevelStructure,
    LognormalSigma2e,
    ModelFamily,
    ModelSpec,
    RandomCoefficient,
    RandomIntercept,
    SpecError,
    cluster_variance_function,
    load_params,
    validate_spec,
)
from .stats import (
    ConditionalStats,
    MarginalStats,
    conditional_stats,
    incidence_rate_ratio,
    marginal_expectation,
    marginal_stats,
    reference_row,
    stats_profile,
    variance_components,
)

__version__ = "0.1.0"
