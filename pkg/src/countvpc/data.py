"""Long-format count data: loading, dummy coding and group summaries.

One row per level-1 unit with the count response, its cluster id, an
optional supercluster id, covariates and an optional log-exposure offset.
Cluster ids must be unique across superclusters (strict nesting).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd

FLOAT_FORMAT = "%.12g"


class DataError(ValueError):
    """Raised for malformed or inconsistent input data."""


@dataclass
class CategoricalSpec:
    levels: tuple[str, ...]
    reference: str

    def __post_init__(self):
        self.levels = tuple(str(v) for v in self.levels)
        self.reference = str(self.reference)
        if self.reference not in self.levels:
            raise DataError(f"reference level {self.reference!r} not among {self.levels}")


@dataclass
class Schema:
    """Column roles for :func:`load_csv`.

    ``covariates=None`` means every column without another role is read as a
    numeric covariate.
    """

    response: str = "y"
    cluster: str = "cluster"
    supercluster: str | None = None
    offset: str | None = None
    covariates: list[str] | None = None
    categorical: dict[str, CategoricalSpec] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, doc: dict) -> "Schema":
        cats = {
            name: CategoricalSpec(tuple(c["levels"]), c["reference"])
            for name, c in (doc.get("categorical") or {}).items()
        }
        return cls(
            response=doc.get("response", "y"),
            cluster=doc.get("cluster", "cluster"),
            supercluster=doc.get("supercluster"),
            offset=doc.get("offset"),
            covariates=doc.get("covariates"),
            categorical=cats,
        )

    @classmethod
    def load(cls, path) -> "Schema":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise DataError(f"cannot parse schema {path}: {exc.msg}") from None
        return cls.from_dict(doc)


@dataclass(eq=False)
class Dataset:
    """Count observations in long format.

    ``cluster`` and ``supercluster`` hold integer codes into
    ``cluster_labels`` / ``supercluster_labels``.  Numeric covariates live in
    ``covariates``; categorical columns awaiting dummy coding live in
    ``categoricals`` with their level metadata in ``categorical_specs``.
    """

    y: np.ndarray
    cluster: np.ndarray
    covariates: dict[str, np.ndarray] = field(default_factory=dict)
    offset: np.ndarray | None = None
    supercluster: np.ndarray | None = None
    cluster_labels: np.ndarray | None = None
    supercluster_labels: np.ndarray | None = None
    categoricals: dict[str, np.ndarray] = field(default_factory=dict)
    categorical_specs: dict[str, CategoricalSpec] = field(default_factory=dict)

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.int64)
        self.cluster = np.asarray(self.cluster, dtype=np.int64)
        if self.cluster_labels is None:
            self.cluster_labels = np.arange(self.cluster.max() + 1 if self.cluster.size else 0)
        if self.supercluster is not None:
            self.supercluster = np.asarray(self.supercluster, dtype=np.int64)
            if self.supercluster_labels is None:
                self.supercluster_labels = np.arange(
                    self.supercluster.max() + 1 if self.supercluster.size else 0
                )

    @property
    def n_obs(self) -> int:
        return int(self.y.size)

    @property
    def n_clusters(self) -> int:
        return len(self.cluster_labels)

    @property
    def n_superclusters(self) -> int:
        return 0 if self.supercluster is None else len(self.supercluster_labels)

    @property
    def covariate_names(self) -> list[str]:
        return list(self.covariates)

    def cluster_sizes(self) -> np.ndarray:
        return np.bincount(self.cluster, minlength=self.n_clusters)

    def column(self, name: str) -> np.ndarray:
        if name in self.covariates:
            return self.covariates[name]
        if name in self.categoricals:
            return self.categoricals[name]
        raise DataError(f"no column named {name!r}")

    def design(self, names) -> np.ndarray:
        """Stack the named numeric covariates into an ``(n_obs, k)`` matrix."""
        missing = [n for n in names if n not in self.covariates]
        if missing:
            raise DataError(f"missing covariate column(s): {', '.join(missing)}")
        if not names:
            return np.empty((self.n_obs, 0))
        x = np.column_stack([np.asarray(self.covariates[n], dtype=float) for n in names])
        if not np.all(np.isfinite(x)):
            raise DataError("non-finite covariate value")
        return x

    def offset_or_zero(self) -> np.ndarray:
        return np.zeros(self.n_obs) if self.offset is None else np.asarray(self.offset, float)

    def to_frame(self) -> pd.DataFrame:
        cols = {"y": self.y, "cluster": np.asarray(self.cluster_labels)[self.cluster]}
        if self.supercluster is not None:
            cols["supercluster"] = np.asarray(self.supercluster_labels)[self.supercluster]
        if self.offset is not None:
            cols["offset"] = self.offset
        for name, values in self.covariates.items():
            cols[name] = np.broadcast_to(values, self.y.shape)
        for name, values in self.categoricals.items():
            cols[name] = values
        return pd.DataFrame(cols)

    def schema(self) -> Schema:
        """The schema under which :meth:`to_frame` output reads back."""
        return Schema(
            response="y",
            cluster="cluster",
            supercluster="supercluster" if self.supercluster is not None else None,
            offset="offset" if self.offset is not None else None,
            covariates=list(self.covariates),
            categorical=dict(self.categorical_specs),
        )


def _codes(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    codes, labels = pd.factorize(pd.Series(values), sort=False)
    return codes.astype(np.int64), np.asarray(labels, dtype=object)


def from_frame(frame: pd.DataFrame, schema: Schema | None = None) -> Dataset:
    """Build a validated :class:`Dataset` from a data frame of raw columns."""
    schema = schema or Schema()
    required = [schema.response, schema.cluster]
    for opt in (schema.supercluster, schema.offset):
        if opt is not None:
            required.append(opt)
    required += list(schema.categorical)
    if schema.covariates is not None:
        required += list(schema.covariates)
    missing = [c for c in required if c not in frame.columns]
    if missing:
        raise DataError(f"missing mandatory column(s): {', '.join(missing)}")

    if frame.isna().any().any():
        bad_col = frame.columns[frame.isna().any()].tolist()[0]
        bad_row = int(np.flatnonzero(frame[bad_col].isna().to_numpy())[0]) + 1
        raise DataError(f"missing value in column {bad_col!r} at data row {bad_row}")

    y_raw = pd.to_numeric(frame[schema.response], errors="coerce").to_numpy(dtype=float)
    bad = ~np.isfinite(y_raw) | (y_raw != np.round(y_raw))
    if bad.any():
        row = int(np.flatnonzero(bad)[0]) + 1
        raise DataError(
            f"non-integer count {frame[schema.response].iloc[row - 1]!r} at data row {row}"
        )
    if (y_raw < 0).any():
        row = int(np.flatnonzero(y_raw < 0)[0]) + 1
        raise DataError(f"negative count {int(y_raw[row - 1])} at data row {row}")

    cluster_raw = frame[schema.cluster].astype(str).to_numpy()
    if (np.char.str_len(cluster_raw.astype(str)) == 0).any():
        raise DataError("empty cluster id")
    cluster, cluster_labels = _codes(cluster_raw)

    supercluster = supercluster_labels = None
    if schema.supercluster is not None:
        super_raw = frame[schema.supercluster].astype(str).to_numpy()
        supercluster, supercluster_labels = _codes(super_raw)
        parents = pd.DataFrame({"c": cluster, "s": supercluster}).drop_duplicates()
        dup = parents["c"].duplicated(keep=False)
        if dup.any():
            c = cluster_labels[parents.loc[dup, "c"].iloc[0]]
            raise DataError(f"cluster {c!r} is nested in more than one supercluster")

    offset = None
    if schema.offset is not None:
        offset = pd.to_numeric(frame[schema.offset], errors="coerce").to_numpy(dtype=float)
        if not np.all(np.isfinite(offset)):
            raise DataError(f"non-numeric offset in column {schema.offset!r}")

    used = {schema.response, schema.cluster, schema.supercluster, schema.offset}
    used |= set(schema.categorical)
    names = schema.covariates
    if names is None:
        names = [c for c in frame.columns if c not in used]
    covariates = {}
    for name in names:
        values = pd.to_numeric(frame[name], errors="coerce").to_numpy(dtype=float)
        if not np.all(np.isfinite(values)):
            raise DataError(f"non-numeric value in covariate column {name!r}")
        covariates[name] = values

    categoricals = {}
    for name, cat in schema.categorical.items():
        values = frame[name].astype(str).to_numpy()
        unseen = sorted(set(values) - set(cat.levels))
        if unseen:
            raise DataError(f"column {name!r} has undeclared level(s) {unseen}")
        categoricals[name] = values

    return Dataset(
        y=y_raw.astype(np.int64),
        cluster=cluster,
        covariates=covariates,
        offset=offset,
        supercluster=supercluster,
        cluster_labels=cluster_labels,
        supercluster_labels=supercluster_labels,
        categoricals=categoricals,
        categorical_specs=dict(schema.categorical),
    )


def load_csv(path, schema: Schema | None = None) -> Dataset:
    """Read a UTF-8 CSV file with a header row into a :class:`Dataset`."""
    schema = schema or Schema()
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    id_cols = [c for c in (schema.cluster, schema.supercluster) if c is not None]
    id_cols += list(schema.categorical)
    try:
        frame = pd.read_csv(
            path,
            dtype={c: str for c in id_cols},
            keep_default_na=False,
            na_values=[""],
            encoding="utf-8",
        )
    except pd.errors.EmptyDataError:
        raise DataError(f"{path} is empty") from None
    return from_frame(frame, schema)


def write_csv(dataset: Dataset, path) -> None:
    dataset.to_frame().to_csv(path, index=False, float_format=FLOAT_FORMAT)


def expand_categoricals(dataset: Dataset, config: dict[str, CategoricalSpec] | None = None) -> Dataset:
    """Replace categorical columns with reference-coded indicator columns.

    A column with L declared levels becomes L-1 indicators named
    ``<column><level>`` (the reference level is dropped).  Columns are
    appended in declaration order, then level order.
    """
    config = dict(dataset.categorical_specs if config is None else config)
    covariates = dict(dataset.covariates)
    remaining = dict(dataset.categoricals)
    for name, cat in config.items():
        if name in remaining:
            values = remaining.pop(name)
        elif name in covariates:
            values = np.asarray(covariates.pop(name))
            values = np.array([_level_str(v) for v in values])
        else:
            raise DataError(f"categorical column {name!r} not present")
        values = np.asarray(values, dtype=str)
        unseen = sorted(set(values) - set(cat.levels))
        if unseen:
            raise DataError(f"column {name!r} has undeclared level(s) {unseen}")
        for level in cat.levels:
            if level == cat.reference:
                continue
            covariates[f"{name}{level}"] = (values == level).astype(float)
    specs = {k: v for k, v in dataset.categorical_specs.items() if k in remaining}
    return replace(dataset, covariates=covariates, categoricals=remaining, categorical_specs=specs)


def _level_str(v) -> str:
    f = float(v)
    return str(int(f)) if f.is_integer() else repr(f)


def group_summary(dataset: Dataset, by: str) -> pd.DataFrame:
    """Count and mean response per level of column ``by``.

    ``by`` may name a covariate, an unexpanded categorical, ``"cluster"`` or
    ``"supercluster"``.
    """
    if by == "cluster":
        keys = np.asarray(dataset.cluster_labels)[dataset.cluster]
    elif by == "supercluster" and dataset.supercluster is not None:
        keys = np.asarray(dataset.supercluster_labels)[dataset.supercluster]
    else:
        keys = np.broadcast_to(dataset.column(by), dataset.y.shape)
    frame = pd.DataFrame({"level": keys, "y": dataset.y})
    out = frame.groupby("level", sort=True)["y"].agg(["size", "mean"]).reset_index()
    out.columns = ["level", "n", "mean"]
    return out
