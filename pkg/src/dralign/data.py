"""Tabular datasets with a binary label and a binary sensitive attribute."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

log = logging.getLogger(__name__)

CELLS = ((0, 0), (0, 1), (1, 0), (1, 1))


@dataclass(frozen=True)
class Column:
    name: str
    kind: str  # "numeric" or "categorical"
    source: str | None = None


@dataclass(frozen=True)
class DatasetTable:
    features: np.ndarray
    labels: np.ndarray
    attrs: np.ndarray
    columns: tuple[Column, ...] = ()
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        X = np.asarray(self.features, dtype=np.float64)
        if X.ndim != 2:
            raise ValueError("features must be a 2-D matrix")
        y = np.asarray(self.labels).astype(np.int64).reshape(-1)
        a = np.asarray(self.attrs).astype(np.int64).reshape(-1)
        if not X.shape[0] == y.size == a.size:
            raise ValueError("features, labels and attrs need equal row counts")
        if not np.all(np.isfinite(X)):
            raise ValueError("features must be finite")
        for name, v in (("labels", y), ("attrs", a)):
            if not np.all((v == 0) | (v == 1)):
                raise ValueError(f"{name} must be 0/1")
        cols = tuple(self.columns) or tuple(Column(f"x{i}", "numeric") for i in range(X.shape[1]))
        if len(cols) != X.shape[1]:
            raise ValueError("one column descriptor per feature is required")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "attrs", a)
        object.__setattr__(self, "columns", cols)

    def __len__(self) -> int:
        return self.labels.size

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def take(self, rows) -> "DatasetTable":
        rows = np.asarray(rows, dtype=np.int64)
        return DatasetTable(self.features[rows], self.labels[rows], self.attrs[rows],
                            self.columns, dict(self.meta))

    def mask(self, a: int, y: int | None = None) -> np.ndarray:
        m = self.attrs == a
        if y is not None:
            m &= self.labels == y
        return m

    def cell_counts(self) -> dict[tuple[int, int], int]:
        return {(a, y): int(self.mask(a, y).sum()) for a, y in CELLS}


@dataclass(frozen=True)
class SubgroupView:
    parent: DatasetTable
    indices: np.ndarray
    a: int
    y: int | None = None

    def __len__(self) -> int:
        return self.indices.size

    @property
    def features(self) -> np.ndarray:
        return self.parent.features[self.indices]

    @property
    def labels(self) -> np.ndarray:
        return self.parent.labels[self.indices]

    @property
    def attrs(self) -> np.ndarray:
        return self.parent.attrs[self.indices]

    def table(self) -> DatasetTable:
        return self.parent.take(self.indices)


def as_xy(batch) -> tuple[np.ndarray, np.ndarray]:
    """(features, labels) from a table, a view or an ``(X, y)`` pair."""
    if isinstance(batch, tuple):
        X, y = batch
    else:
        X, y = batch.features, batch.labels
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if y.size == 0:
        raise ValueError("empty subgroup")
    return X, y


def subgroup(data: DatasetTable, a: int, y: int | None = None) -> SubgroupView:
    idx = np.flatnonzero(data.mask(a, y))
    if idx.size == 0:
        raise ValueError(f"empty subgroup a={a}" + ("" if y is None else f", y={y}"))
    return SubgroupView(data, idx, a, y)


# -- CSV ingestion ---------------------------------------------------------


@dataclass
class Schema:
    """Column roles for :func:`load_csv`.

    ``label_strip`` characters are trimmed from the end of label values
    before mapping.  ``positive`` / ``protected`` list the raw values mapped to label 1 and
    attribute 1; anything else maps to 0, but each column must be binary.
    Columns not named in ``categorical`` are treated as numeric unless they
    fail to parse as numbers.
    """

    label: str
    sensitive: str
    positive: Sequence = (1,)
    protected: Sequence = (1,)
    categorical: Sequence[str] | None = None
    drop: Sequence[str] = ()
    include_sensitive: bool = True
    names: Sequence[str] | None = None
    na_values: Sequence[str] = ("?",)
    comment: str | None = None
    label_strip: str = ""


def _binary(col: pd.Series, ones: Sequence, what: str, strip: str = "") -> np.ndarray:
    raw = col.astype(str).str.strip()
    if strip:
        raw = raw.str.rstrip(strip)
    ones = {str(v).strip() for v in ones}
    values = set(raw.unique())
    if len(values) > 2:
        raise ValueError(f"{what} column is not binary: {sorted(values)[:6]}")
    return raw.isin(ones).to_numpy().astype(np.int64)


def load_csv(path, schema: Schema) -> DatasetTable:
    """Read a CSV into a :class:`DatasetTable`.

    Categoricals are one-hot expanded; numerics are left unscaled (fit a
    :class:`Standardizer` on the training split).  Rows with missing values
    are dropped and counted in ``meta["dropped"]``.
    """
    paths = [path] if isinstance(path, (str, Path)) else list(path)
    frames = []
    for p in paths:
        df = pd.read_csv(p, header=None if schema.names else "infer", names=schema.names,
                         skipinitialspace=True, na_values=list(schema.na_values),
                         comment=schema.comment, float_precision="round_trip")
        frames.append(df)
    df = pd.concat(frames, ignore_index=True)
    if df.empty:
        raise ValueError(f"no rows in {path}")
    for c in (schema.label, schema.sensitive, *schema.drop, *(schema.categorical or ())):
        if c not in df.columns:
            raise KeyError(f"unknown column {c!r}")
    n_raw = len(df)
    df = df.drop(columns=list(schema.drop)).dropna().reset_index(drop=True)
    dropped = n_raw - len(df)
    if dropped:
        log.info("dropped %d rows with missing values", dropped)
    if df.empty:
        raise ValueError("every row had a missing value")

    y = _binary(df[schema.label], schema.positive, "label", schema.label_strip)
    a = _binary(df[schema.sensitive], schema.protected, "sensitive")

    feature_cols = [c for c in df.columns if c != schema.label]
    if not schema.include_sensitive:
        feature_cols.remove(schema.sensitive)
    categorical = set(schema.categorical) if schema.categorical is not None else {
        c for c in feature_cols if not pd.api.types.is_numeric_dtype(df[c])
    }
    blocks, columns = [], []
    for c in feature_cols:
        if c == schema.sensitive:
            blocks.append(a.astype(np.float64)[:, None])
            columns.append(Column(c, "categorical", c))
        elif c in categorical:
            levels = sorted(df[c].astype(str).str.strip().unique())
            raw = df[c].astype(str).str.strip().to_numpy()
            blocks.append(np.stack([(raw == lv).astype(np.float64) for lv in levels], axis=1))
            columns.extend(Column(f"{c}={lv}", "categorical", c) for lv in levels)
        else:
            blocks.append(pd.to_numeric(df[c]).to_numpy(dtype=np.float64)[:, None])
            columns.append(Column(c, "numeric", c))
    X = np.concatenate(blocks, axis=1) if blocks else np.zeros((len(df), 0))
    return DatasetTable(X, y, a, tuple(columns), {"dropped": dropped, "source": str(path)})


CATEGORICAL_TAG = "cat:"


def save_csv(data: DatasetTable, path) -> None:
    """Write the canonical CSV form: feature columns, then ``label``, ``sensitive``.

    Categorical-expanded columns carry a ``cat:`` prefix so their kind survives.
    """
    names = [(CATEGORICAL_TAG if c.kind == "categorical" else "") + c.name for c in data.columns]
    df = pd.DataFrame(data.features, columns=names)
    df["label"] = data.labels
    df["sensitive"] = data.attrs
    df.to_csv(path, index=False, float_format="%.17g")


def canonical_schema() -> Schema:
    """Schema that reads back a file written by :func:`save_csv`."""
    return Schema(label="label", sensitive="sensitive", categorical=[],
                  include_sensitive=False)


def load_canonical(path) -> DatasetTable:
    """Read a :func:`save_csv` file, restoring column names and kinds."""
    data = load_csv(path, canonical_schema())
    cols = []
    for c in data.columns:
        if c.name.startswith(CATEGORICAL_TAG):
            name = c.name[len(CATEGORICAL_TAG):]
            cols.append(Column(name, "categorical", name.split("=")[0]))
        else:
            cols.append(c)
    return replace(data, columns=tuple(cols))


ADULT_COLUMNS = [
    "age", "workclass", "fnlwgt", "education", "education-num", "marital-status",
    "occupation", "relationship", "race", "sex", "capital-gain", "capital-loss",
    "hours-per-week", "native-country", "income",
]


def adult_schema() -> Schema:
    # a=1 is the female subgroup; the test file's labels carry a trailing "."
    return Schema(label="income", sensitive="sex", positive=(">50K",),
                  protected=("Female",), names=ADULT_COLUMNS, comment="|", label_strip=".")


def load_adult(directory) -> DatasetTable:
    d = Path(directory)
    files = [f for f in (d / "adult.data", d / "adult.test") if f.exists()]
    if not files:
        raise FileNotFoundError(f"no adult.data / adult.test under {d}")
    return load_csv(files, adult_schema())


# -- preprocessing ---------------------------------------------------------


@dataclass(frozen=True)
class Standardizer:
    columns: np.ndarray
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, data: DatasetTable) -> "Standardizer":
        cols = np.array([i for i, c in enumerate(data.columns) if c.kind == "numeric"], dtype=np.int64)
        X = data.features[:, cols]
        std = X.std(axis=0)
        return cls(cols, X.mean(axis=0), np.where(std > 0, std, 1.0))

    def transform(self, data: DatasetTable) -> DatasetTable:
        X = data.features.copy()
        X[:, self.columns] = (X[:, self.columns] - self.mean) / self.std
        return replace(data, features=X, meta=dict(data.meta))


def split(data: DatasetTable, fractions=(0.8, 0.1, 0.1), seed: int = 0):
    """Stratified split by (a, y) cell; returns one table per fraction."""
    fractions = np.asarray(fractions, dtype=np.float64)
    if np.any(fractions <= 0) or not np.isclose(fractions.sum(), 1.0):
        raise ValueError("fractions must be positive and sum to 1")
    rng = np.random.default_rng(seed)
    parts: list[list[np.ndarray]] = [[] for _ in fractions]
    for a, y in CELLS:
        idx = np.flatnonzero(data.mask(a, y))
        if idx.size == 0:
            continue
        idx = rng.permutation(idx)
        # largest-remainder allocation, then make sure every split gets a row
        raw = fractions * idx.size
        counts = np.floor(raw).astype(int)
        for i in np.argsort(-(raw - counts), kind="stable")[: idx.size - counts.sum()]:
            counts[i] += 1
        if idx.size >= len(fractions):
            for i in range(len(counts)):
                if counts[i] == 0:
                    counts[np.argmax(counts)] -= 1
                    counts[i] = 1
        bounds = np.concatenate([[0], np.cumsum(counts)])
        for i in range(len(fractions)):
            parts[i].append(idx[bounds[i]:bounds[i + 1]])
    return tuple(data.take(np.sort(np.concatenate(p))) for p in parts)


def prepare(data: DatasetTable, fractions=(0.8, 0.1, 0.1), seed: int = 0):
    """Split, then standardize numerics with training-split statistics only."""
    parts = split(data, fractions, seed)
    scaler = Standardizer.fit(parts[0])
    return tuple(scaler.transform(p) for p in parts)


# -- synthetic data --------------------------------------------------------


def synth_biased(n: int, d: int = 6, bias: float = 0.5, noise: float = 0.5, seed: int = 0) -> DatasetTable:
    """Synthetic table whose label leans toward a=1 as ``bias`` grows.

    Features are standard normal and independent of ``a``; the label is
    ``1[x.v + 2*bias*(a - 1/2) + noise*eps > 0]``.  The attribute is appended
    as the last feature so a model can pick it up, as with gender in Adult.
    """
    if n < 40 or d < 2:
        raise ValueError("synth_biased needs n >= 40 and d >= 2")
    rng = np.random.default_rng(seed)
    a = (rng.random(n) < 0.5).astype(np.int64)
    X = rng.standard_normal((n, d))
    v = rng.standard_normal(d)
    v /= np.linalg.norm(v)
    score = X @ v + 2.0 * bias * (a - 0.5) + noise * rng.standard_normal(n)
    y = (score > 0).astype(np.int64)
    cols = tuple(Column(f"x{i}", "numeric") for i in range(d)) + (Column("a", "categorical", "a"),)
    return DatasetTable(np.column_stack([X, a.astype(np.float64)]), y, a, cols,
                        {"source": f"synth_biased(n={n}, d={d}, bias={bias}, noise={noise}, seed={seed})"})
