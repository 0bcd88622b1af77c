"""Monte Carlo check of the closed-form marginal statistics.

A fitted model is treated as a data generating process: one large
hierarchical dataset is drawn from it, and the marginal statistics are
re-estimated from sample moments (grand mean, sample variance, variance of
cluster means, variance of within-cluster deviations).

Random numbers come from numpy's Philox counter-based generator.  Every
cluster owns a substream whose counter starts at ``(0, 0, j + 1, k)`` under
the key ``seed``, for global cluster index ``j`` and supercluster ``k``;
supercluster effects use counter ``(0, 0, 0, k)``.  A cluster's draws
therefore do not depend on which thread produced them or in what order.
Within a substream the draw order is: cluster random effects, unit-level
overdispersion draws, Poisson counts.  Streams are reproducible for a fixed
numpy major version (pinned in the package metadata).
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields

import numpy as np

from .data import Dataset, DataError
from .model import ModelFamily, ModelSpec, RandomCoefficient, validate_spec
from .stats import MarginalStats, marginal_stats, reference_row

DEFAULT_SEED = 20200520


def default_seed() -> int:
    return int(os.environ.get("COUNTVPC_SEED", DEFAULT_SEED))


@dataclass
class SimConfig:
    """Sizes of the simulated hierarchy.

    ``n_clusters`` is the number of clusters per supercluster for
    three-level models.  ``n_units`` may be a single size or an array of
    per-cluster sizes (one entry per cluster in total).
    """

    n_clusters: int = 10000
    n_units: int | np.ndarray = 1000
    n_superclusters: int | None = None
    seed: int | None = None
    threads: int = 1

    def __post_init__(self):
        if self.seed is None:
            self.seed = default_seed()
        if not 0 <= int(self.seed) < 2**128:
            raise ValueError("seed must be a nonnegative integer below 2**128")
        if self.n_clusters < 2:
            raise ValueError("need at least 2 clusters")
        if self.n_superclusters is not None and self.n_superclusters < 2:
            raise ValueError("need at least 2 superclusters")
        sizes = np.atleast_1d(np.asarray(self.n_units))
        if np.any(sizes < 2):
            raise ValueError("need at least 2 units per cluster")
        if self.threads < 1:
            raise ValueError("threads must be positive")
        self.cluster_sizes()

    @property
    def total_clusters(self) -> int:
        return self.n_clusters * (self.n_superclusters or 1)

    def cluster_sizes(self) -> np.ndarray:
        sizes = np.asarray(self.n_units, dtype=np.int64)
        if sizes.ndim == 0:
            return np.full(self.total_clusters, int(sizes))
        if sizes.size != self.total_clusters:
            raise ValueError(f"{sizes.size} cluster sizes given for {self.total_clusters} clusters")
        return sizes

    @classmethod
    def full(cls, spec: ModelSpec, seed=None, threads=1) -> "SimConfig":
        """Full-size design: 10000 x 1000, or 100 x 100 x 1000 for three levels."""
        if spec.is_three_level:
            return cls(n_clusters=100, n_units=1000, n_superclusters=100, seed=seed, threads=threads)
        return cls(n_clusters=10000, n_units=1000, seed=seed, threads=threads)

    @classmethod
    def desk(cls, spec: ModelSpec, seed=None, threads=1) -> "SimConfig":
        """Quick design with 2000 clusters of 200 units."""
        if spec.is_three_level:
            return cls(n_clusters=50, n_units=200, n_superclusters=40, seed=seed, threads=threads)
        return cls(n_clusters=2000, n_units=200, seed=seed, threads=threads)


def _stream(seed: int, j: int, k: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(counter=[0, 0, j, k], key=int(seed)))


def _cluster_effect_sampler(spec: ModelSpec):
    random = spec.random
    if isinstance(random, RandomCoefficient):
        evals, evecs = np.linalg.eigh(random.omega)
        root = evecs * np.sqrt(np.clip(evals, 0, None))
        q = root.shape[0]
        return lambda rng: root @ rng.standard_normal(q)
    sd = np.sqrt(random.sigma2_u)
    return lambda rng: sd * rng.standard_normal(1)


def gamma_multipliers(alpha: float, size: int, rng: np.random.Generator) -> np.ndarray:
    """Draws of exp(e) ~ Gamma(shape 1/alpha, scale alpha): mean 1, variance alpha."""
    return rng.gamma(1.0 / alpha, alpha, size)


def _draw_counts(spec: ModelSpec, rng, eta, n):
    family = spec.family
    disp = spec.dispersion_value
    if family is ModelFamily.POISSON or disp == 0:
        mu = np.full(n, np.exp(eta))
    elif family is ModelFamily.NB2:
        mu = np.exp(eta) * gamma_multipliers(disp, n, rng)
    elif family is ModelFamily.POISSON_LOGNORMAL:
        mu = np.exp(eta + rng.normal(0.0, np.sqrt(disp), n))
    else:
        mu = rng.gamma(np.exp(eta) / disp, disp, n)
    return rng.poisson(mu)


def simulate_dataset(spec: ModelSpec, cfg: SimConfig, covariate_row: dict | None = None) -> Dataset:
    """Draw one hierarchical dataset from ``spec``.

    Every unit shares the covariate values in ``covariate_row`` (missing
    covariates are 0, i.e. the reference unit).  Identical ``(spec, cfg,
    covariate_row)`` give bit-identical datasets whatever ``cfg.threads`` is.
    """
    spec = validate_spec(spec)
    row = dict(covariate_row or {})
    eta_fixed, z = reference_row(spec, **row)
    sizes = cfg.cluster_sizes()
    n_super = cfg.n_superclusters if spec.is_three_level else None
    if spec.is_three_level and n_super is None:
        raise ValueError("three-level model needs n_superclusters")
    n_total = cfg.n_clusters * (n_super or 1)
    if sizes.size != n_total:
        # superclusters requested for a two-level spec: they are ignored
        if np.ndim(cfg.n_units) != 0:
            raise ValueError(f"{sizes.size} cluster sizes given for {n_total} clusters")
        sizes = np.full(n_total, int(sizes[0]))
    seed = int(cfg.seed)
    sample_u = _cluster_effect_sampler(spec)

    if n_super:
        sd_v = np.sqrt(spec.sigma2_v)
        v = np.array([sd_v * _stream(seed, 0, k).standard_normal() for k in range(n_super)])
        super_of = np.repeat(np.arange(n_super), cfg.n_clusters)
    else:
        v = np.zeros(1)
        super_of = np.zeros(n_total, dtype=np.int64)

    def one_cluster(j):
        rng = _stream(seed, j + 1, int(super_of[j]))
        u = sample_u(rng)
        eta = eta_fixed + v[super_of[j]] + float(z @ u)
        return _draw_counts(spec, rng, eta, int(sizes[j]))

    if cfg.threads > 1:
        with ThreadPoolExecutor(cfg.threads) as pool:
            parts = list(pool.map(one_cluster, range(n_total), chunksize=256))
    else:
        parts = [one_cluster(j) for j in range(n_total)]

    y = np.concatenate(parts).astype(np.int64)
    cluster = np.repeat(np.arange(n_total, dtype=np.int64), sizes)
    covariates = {
        name: np.broadcast_to(float(row.get(name, 0.0)), y.shape)
        for name in spec.fixed.covariate_names[1:]
    }
    return Dataset(
        y=y,
        cluster=cluster,
        covariates=covariates,
        supercluster=super_of[cluster] if n_super else None,
    )


def estimate_components(dataset: Dataset, three_level: bool | None = None) -> MarginalStats:
    """Moment estimates of the marginal statistics from simulated data.

    Components are unit-weighted: the level-2 component is the variance
    (over units, divisor N - 1) of each unit's cluster mean, or of its
    cluster mean minus its supercluster mean at three levels; the level-1
    component is the variance of deviations from cluster means.  With these
    divisors the components add up exactly to the sample variance of y.
    VPCs are ``nan`` when the data have no variation.
    """
    if three_level is None:
        three_level = dataset.supercluster is not None
    if three_level and dataset.supercluster is None:
        raise DataError("degenerate grouping: no supercluster ids")
    y = dataset.y.astype(float)
    n = y.size
    sizes = dataset.cluster_sizes()
    if dataset.n_clusters < 2 or np.any(sizes < 2):
        raise DataError("degenerate grouping: need >= 2 clusters with >= 2 units each")
    grand = y.mean()
    cmean = np.bincount(dataset.cluster, weights=y, minlength=dataset.n_clusters) / sizes
    dev1 = y - cmean[dataset.cluster]
    comp_l1 = float(np.dot(dev1, dev1) / (n - 1))
    if three_level:
        ssizes = np.bincount(dataset.supercluster, minlength=dataset.n_superclusters)
        if dataset.n_superclusters < 2 or np.any(ssizes == 0):
            raise DataError("degenerate grouping: need >= 2 superclusters")
        smean = np.bincount(dataset.supercluster, weights=y, minlength=dataset.n_superclusters) / ssizes
        # parent supercluster of every cluster
        parent = np.zeros(dataset.n_clusters, dtype=np.int64)
        parent[dataset.cluster] = dataset.supercluster
        comp_l3 = float(np.dot(ssizes, (smean - grand) ** 2) / (n - 1))
        comp_l2 = float(np.dot(sizes, (cmean - smean[parent]) ** 2) / (n - 1))
    else:
        comp_l3 = 0.0
        comp_l2 = float(np.dot(sizes, (cmean - grand) ** 2) / (n - 1))
    variance = float(np.var(y, ddof=1))
    total = comp_l3 + comp_l2 + comp_l1
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = (lambda c: float(c / total)) if total > 0 else (lambda c: float("nan"))
        return MarginalStats(
            mu_m=float(grand),
            variance=variance,
            comp_l3=comp_l3,
            comp_l2=comp_l2,
            comp_l1=comp_l1,
            vpc3=ratio(comp_l3) if three_level else None,
            vpc2=ratio(comp_l2),
            vpc23=ratio(comp_l3 + comp_l2) if three_level else None,
            vpc1=ratio(comp_l1),
            three_level=three_level,
        )


_REPORT_FIELDS = ("mu_m", "variance", "comp_l3", "comp_l2", "comp_l1", "vpc3", "vpc2", "vpc1")
_LABELS = {
    "mu_m": "Marginal expectation",
    "variance": "Marginal variance",
    "comp_l3": "Level-3 component",
    "comp_l2": "Level-2 component",
    "comp_l1": "Level-1 component",
    "vpc3": "Level-3 VPC",
    "vpc2": "Level-2 VPC",
    "vpc1": "Level-1 VPC",
}


@dataclass
class SimReport:
    exact: MarginalStats
    simulated: MarginalStats
    config: SimConfig
    covariate_row: dict

    def _fields(self):
        three = self.exact.three_level
        return [f for f in _REPORT_FIELDS if three or f not in ("comp_l3", "vpc3")]

    @property
    def abs_diff(self) -> dict:
        return {f: getattr(self.simulated, f) - getattr(self.exact, f) for f in self._fields()}

    @property
    def rel_diff(self) -> dict:
        out = {}
        for f in self._fields():
            e = getattr(self.exact, f)
            out[f] = (getattr(self.simulated, f) - e) / e if e else float("nan")
        return out

    def to_dict(self, digits: int = 9) -> dict:
        r = lambda v: None if v is None else float(f"{v:.{digits}g}")  # noqa: E731
        cfg = {f.name: getattr(self.config, f.name) for f in fields(self.config)}
        if isinstance(cfg["n_units"], np.ndarray):
            cfg["n_units"] = cfg["n_units"].tolist()
        return {
            "config": cfg,
            "covariate_row": self.covariate_row,
            "exact": {f: r(getattr(self.exact, f)) for f in self._fields()},
            "simulated": {f: r(getattr(self.simulated, f)) for f in self._fields()},
            "abs_diff": {f: r(v) for f, v in self.abs_diff.items()},
            "rel_diff": {f: r(v) for f, v in self.rel_diff.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def to_table(self) -> str:
        lines = [f"{'':<22}{'Exact method':>16}{'Simulation method':>20}"]
        for f in self._fields():
            lines.append(
                f"{_LABELS[f]:<22}{getattr(self.exact, f):>16.4f}{getattr(self.simulated, f):>20.4f}"
            )
        cfg = self.config
        size = f"K={cfg.n_superclusters}, " if self.exact.three_level else ""
        n = cfg.n_units if np.ndim(cfg.n_units) == 0 else f"mean {np.mean(cfg.n_units):.1f}"
        lines.append(f"({size}J={cfg.n_clusters}, n={n}, seed={cfg.seed})")
        return "\n".join(lines) + "\n"


def verify(spec: ModelSpec, cfg: SimConfig | None = None, covariate_row: dict | None = None) -> SimReport:
    """Compare closed-form statistics with moment estimates from one simulated dataset."""
    spec = validate_spec(spec)
    cfg = cfg or SimConfig.full(spec)
    row = dict(covariate_row or {})
    eta, z = reference_row(spec, **row)
    exact = marginal_stats(spec, eta, z)
    data = simulate_dataset(spec, cfg, row)
    simulated = estimate_components(data, spec.is_three_level)
    return SimReport(exact=exact, simulated=simulated, config=cfg, covariate_row=row)


__all__ = ["SimConfig", "SimReport", "simulate_dataset", "estimate_components", "verify", "gamma_multipliers"]
