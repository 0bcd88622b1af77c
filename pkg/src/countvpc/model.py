"""Parameterization of multilevel count models.

A :class:`ModelSpec` bundles everything needed to evaluate the marginal
statistics of a fitted model: the response family, the level structure,
the fixed-effect coefficients (log scale), the cluster random part and the
overdispersion parameter.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Union

import numpy as np

PSD_TOLERANCE = 1e-10


class SpecError(ValueError):
    """Raised when a model specification violates one of its invariants."""


class ModelFamily(str, enum.Enum):
    POISSON = "poisson"
    POISSON_LOGNORMAL = "poisson_lognormal"
    NB2 = "nb2"
    NB1 = "nb1"


class LevelStructure(str, enum.Enum):
    TWO = "two"
    THREE = "three"


@dataclass(frozen=True, eq=False)
class FixedEffects:
    """Log-scale regression coefficients; element 0 is the intercept."""

    beta: np.ndarray
    covariate_names: tuple[str, ...] = ()

    def __post_init__(self):
        beta = np.array(self.beta, dtype=float).reshape(-1)
        beta.setflags(write=False)
        object.__setattr__(self, "beta", beta)
        names = tuple(self.covariate_names)
        if not names:
            names = ("_cons",) + tuple(f"x{k}" for k in range(1, beta.size))
        object.__setattr__(self, "covariate_names", names)

    @property
    def intercept(self) -> float:
        return float(self.beta[0])

    def linear_predictor(self, x) -> np.ndarray:
        """x'beta for rows of covariates *excluding* the intercept column."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return self.beta[0] + x @ self.beta[1:]


@dataclass(frozen=True)
class RandomIntercept:
    sigma2_u: float


@dataclass(frozen=True, eq=False)
class RandomCoefficient:
    """Random intercept plus random slopes with covariance ``omega``.

    ``z_columns[0]`` is the intercept; the remaining labels name the
    covariates whose coefficients vary across clusters.
    """

    omega: np.ndarray
    z_columns: tuple[str, ...] = ()

    def __post_init__(self):
        omega = np.array(self.omega, dtype=float)
        if omega.ndim == 0:
            omega = omega.reshape(1, 1)
        omega.setflags(write=False)
        object.__setattr__(self, "omega", omega)
        cols = tuple(self.z_columns)
        if not cols:
            cols = ("_cons",) + tuple(f"z{k}" for k in range(1, omega.shape[0]))
        object.__setattr__(self, "z_columns", cols)

    @property
    def sigma2_u0(self) -> float:
        return float(self.omega[0, 0])


RandomPart = Union[RandomIntercept, RandomCoefficient]


@dataclass(frozen=True)
class LognormalSigma2e:
    sigma2_e: float


@dataclass(frozen=True)
class Alpha:
    alpha: float


@dataclass(frozen=True)
class Delta:
    delta: float


Dispersion = Union[None, LognormalSigma2e, Alpha, Delta]

_DISPERSION_FOR_FAMILY = {
    ModelFamily.POISSON: type(None),
    ModelFamily.POISSON_LOGNORMAL: LognormalSigma2e,
    ModelFamily.NB2: Alpha,
    ModelFamily.NB1: Delta,
}


@dataclass(frozen=True, eq=False)
class ModelSpec:
    family: ModelFamily
    fixed: FixedEffects
    random: RandomPart
    dispersion: Dispersion = None
    levels: LevelStructure = LevelStructure.TWO
    sigma2_v: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "family", ModelFamily(self.family))
        object.__setattr__(self, "levels", LevelStructure(self.levels))
        if not isinstance(self.fixed, FixedEffects):
            object.__setattr__(self, "fixed", FixedEffects(self.fixed))

    @property
    def dispersion_value(self) -> float:
        """The scalar overdispersion parameter, 0 for the plain Poisson."""
        d = self.dispersion
        if d is None:
            return 0.0
        if isinstance(d, Alpha):
            return float(d.alpha)
        if isinstance(d, Delta):
            return float(d.delta)
        return float(d.sigma2_e)

    @property
    def is_three_level(self) -> bool:
        return self.levels is LevelStructure.THREE

    def with_dispersion(self, dispersion: Dispersion, family=None) -> "ModelSpec":
        return replace(self, dispersion=dispersion, family=family or self.family)

    def to_dict(self) -> dict:
        out = {
            "family": self.family.value,
            "levels": self.levels.value,
            "beta": [float(b) for b in self.fixed.beta],
            "covariates": list(self.fixed.covariate_names),
        }
        if isinstance(self.random, RandomIntercept):
            out["random"] = {"type": "intercept", "sigma2_u": float(self.random.sigma2_u)}
        else:
            out["random"] = {
                "type": "coefficient",
                "omega": self.random.omega.tolist(),
                "z_columns": list(self.random.z_columns),
            }
        if self.sigma2_v is not None:
            out["sigma2_v"] = float(self.sigma2_v)
        d = self.dispersion
        if isinstance(d, Alpha):
            out["dispersion"] = {"alpha": float(d.alpha)}
        elif isinstance(d, Delta):
            out["dispersion"] = {"delta": float(d.delta)}
        elif isinstance(d, LognormalSigma2e):
            out["dispersion"] = {"sigma2_e": float(d.sigma2_e)}
        return out

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelSpec":
        if not isinstance(doc, dict):
            raise SpecError("parameter document must be a JSON object")
        try:
            family = ModelFamily(doc["family"])
            beta = doc["beta"]
            random_doc = doc["random"]
        except KeyError as exc:
            raise SpecError(f"missing key {exc.args[0]!r}") from None
        except ValueError:
            raise SpecError(f"unknown family {doc.get('family')!r}") from None
        try:
            levels = LevelStructure(doc.get("levels", "two"))
        except ValueError:
            raise SpecError(f"unknown level structure {doc.get('levels')!r}") from None
        fixed = FixedEffects(beta, tuple(doc.get("covariates", ())))
        rtype = random_doc.get("type")
        if rtype == "intercept":
            random = RandomIntercept(float(random_doc["sigma2_u"]))
        elif rtype == "coefficient":
            random = RandomCoefficient(random_doc["omega"], tuple(random_doc.get("z_columns", ())))
        else:
            raise SpecError(f"unknown random part type {rtype!r}")
        disp_doc = doc.get("dispersion")
        if not disp_doc:
            dispersion = None
        elif len(disp_doc) != 1:
            raise SpecError("dispersion must hold exactly one of alpha, delta, sigma2_e")
        elif "alpha" in disp_doc:
            dispersion = Alpha(float(disp_doc["alpha"]))
        elif "delta" in disp_doc:
            dispersion = Delta(float(disp_doc["delta"]))
        elif "sigma2_e" in disp_doc:
            dispersion = LognormalSigma2e(float(disp_doc["sigma2_e"]))
        else:
            raise SpecError(f"unknown dispersion key {next(iter(disp_doc))!r}")
        sigma2_v = doc.get("sigma2_v")
        return cls(
            family=family,
            fixed=fixed,
            random=random,
            dispersion=dispersion,
            levels=levels,
            sigma2_v=None if sigma2_v is None else float(sigma2_v),
        )


def load_params(path) -> ModelSpec:
    """Read and validate a JSON parameter file."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SpecError(f"cannot parse {path}: {exc.msg}") from None
    return validate_spec(ModelSpec.from_dict(doc))


def dump_params(spec: ModelSpec, path, extra: dict | None = None) -> None:
    doc = spec.to_dict()
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def _nonneg(name, value):
    if value is None or not np.isfinite(value) or value < 0:
        raise SpecError(f"{name} must be finite and nonnegative, got {value!r}")


def _clamp_psd(omega: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(omega)):
        raise SpecError("omega has non-finite entries")
    if omega.ndim != 2 or omega.shape[0] != omega.shape[1]:
        raise SpecError(f"omega must be square, got shape {omega.shape}")
    if not np.allclose(omega, omega.T, rtol=0, atol=1e-12):
        raise SpecError("omega is not symmetric")
    evals, evecs = np.linalg.eigh(omega)
    if evals.min() < -PSD_TOLERANCE:
        raise SpecError(f"omega is not positive semi-definite (min eigenvalue {evals.min():.3g})")
    if evals.min() >= 0:
        return omega
    return (evecs * np.clip(evals, 0, None)) @ evecs.T


def validate_spec(spec: ModelSpec) -> ModelSpec:
    """Check every invariant of ``spec`` and return it.

    Raises :class:`SpecError` describing the first violated invariant.
    Covariance matrices that are indefinite only by rounding (eigenvalues
    no lower than ``-1e-10``) are clamped to the PSD cone.
    """
    beta = spec.fixed.beta
    if beta.size < 1 or not np.all(np.isfinite(beta)):
        raise SpecError("beta must be a non-empty vector of finite values")
    if len(spec.fixed.covariate_names) != beta.size:
        raise SpecError(
            f"covariate names ({len(spec.fixed.covariate_names)}) "
            f"do not match beta length ({beta.size})"
        )

    random = spec.random
    if isinstance(random, RandomIntercept):
        _nonneg("sigma2_u", random.sigma2_u)
    elif isinstance(random, RandomCoefficient):
        if len(random.z_columns) != random.omega.shape[0]:
            raise SpecError("z_columns must label every row of omega")
        clamped = _clamp_psd(random.omega)
        if clamped is not random.omega:
            spec = replace(spec, random=RandomCoefficient(clamped, random.z_columns))
    else:
        raise SpecError(f"unsupported random part {random!r}")

    expected = _DISPERSION_FOR_FAMILY[spec.family]
    if not isinstance(spec.dispersion, expected):
        raise SpecError(
            f"dispersion mismatch: family {spec.family.value} cannot take "
            f"{type(spec.dispersion).__name__}"
        )
    if spec.dispersion is not None:
        _nonneg(fields(spec.dispersion)[0].name, spec.dispersion_value)

    if spec.is_three_level:
        if spec.sigma2_v is None:
            raise SpecError("three-level model requires sigma2_v")
        _nonneg("sigma2_v", spec.sigma2_v)
    elif spec.sigma2_v is not None:
        raise SpecError("sigma2_v given for a two-level model")
    return spec


def cluster_variance_function(random: RandomPart, z=None) -> float:
    """Between-cluster variance on the log scale for design vector ``z``.

    For a random intercept this is sigma2_u whatever ``z`` is; for random
    coefficients it is the quadratic form z' Omega z (``z[0]`` is the
    intercept entry, normally 1).
    """
    if isinstance(random, RandomIntercept):
        return float(random.sigma2_u)
    omega = random.omega
    if z is None:
        z = np.eye(omega.shape[0])[0]
    z = np.asarray(z, dtype=float)
    if z.shape != (omega.shape[0],):
        raise SpecError(f"design vector length {z.size} does not match omega {omega.shape}")
    return max(float(z @ omega @ z), 0.0)


def cluster_variance_rows(random: RandomPart, z: np.ndarray) -> np.ndarray:
    """Vectorised :func:`cluster_variance_function` over rows of ``z``."""
    z = np.atleast_2d(np.asarray(z, dtype=float))
    if isinstance(random, RandomIntercept):
        return np.full(z.shape[0], float(random.sigma2_u))
    if z.shape[1] != random.omega.shape[0]:
        raise SpecError(f"design rows have {z.shape[1]} columns, omega is {random.omega.shape}")
    return np.clip(np.einsum("ij,jk,ik->i", z, random.omega, z), 0.0, None)
