"""Tabular data loading, preprocessing and the fixed 45/45/10 split."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)

MISSING_TOKENS = {"", "nan", "NaN", "NAN"}


class DataError(ValueError):
    """Base class for ingestion failures."""


class ParseError(DataError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class SchemaError(DataError):
    pass


class EmptyDatasetError(DataError):
    pass


class SizeError(DataError):
    pass


@dataclass(frozen=True)
class FeatureMeta:
    name: str
    kind: str = "numeric"  # "numeric" | "categorical"
    observed_min: float = 0.0
    observed_max: float = 0.0
    categories: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in ("numeric", "categorical"):
            raise SchemaError(f"unknown feature kind {self.kind!r}")
        if self.kind == "numeric" and self.observed_min > self.observed_max:
            raise SchemaError(f"{self.name}: observed_min > observed_max")
        if self.kind == "categorical" and not self.categories:
            raise SchemaError(f"{self.name}: categorical feature needs categories")

    @property
    def is_numeric(self) -> bool:
        return self.kind == "numeric"


@dataclass
class Dataset:
    """Rows are float; categorical cells hold indices into ``FeatureMeta.categories``."""

    schema: list[FeatureMeta]
    rows: np.ndarray
    labels: np.ndarray
    row_ids: np.ndarray
    num_classes: int | None = None
    dropped_features: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=float)
        if self.rows.ndim == 1:
            self.rows = self.rows.reshape(-1, len(self.schema))
        self.labels = np.asarray(self.labels, dtype=int)
        self.row_ids = np.asarray(self.row_ids, dtype=int)
        n, d = self.rows.shape
        if d != len(self.schema):
            raise SchemaError(f"rows have {d} columns, schema has {len(self.schema)}")
        if len(self.labels) != n or len(self.row_ids) != n:
            raise SchemaError("rows, labels and row_ids differ in length")
        names = [f.name for f in self.schema]
        if len(set(names)) != len(names):
            raise SchemaError("feature names must be unique")
        if len(np.unique(self.row_ids)) != n:
            raise SchemaError("row_ids must be unique")
        if self.num_classes is None:
            self.num_classes = int(self.labels.max()) + 1 if n else 0
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise SchemaError("labels outside [0, K)")

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def n_features(self) -> int:
        return len(self.schema)

    @property
    def numeric_mask(self) -> np.ndarray:
        return np.array([f.is_numeric for f in self.schema], dtype=bool)

    def subset(self, mask_or_idx) -> "Dataset":
        idx = np.asarray(mask_or_idx)
        return replace(self, rows=self.rows[idx], labels=self.labels[idx], row_ids=self.row_ids[idx])

    def select_ids(self, ids) -> "Dataset":
        """Rows whose row_id is in ``ids``, in this dataset's order."""
        return self.subset(np.isin(self.row_ids, np.fromiter(ids, dtype=int)))

    def index_of(self, ids) -> np.ndarray:
        pos = {int(r): i for i, r in enumerate(self.row_ids)}
        return np.array([pos[int(i)] for i in ids], dtype=int)


@dataclass
class DataSplits:
    target_train: Dataset
    shadow_pool: Dataset
    validation: Dataset

    def parts(self) -> tuple[Dataset, Dataset, Dataset]:
        return self.target_train, self.shadow_pool, self.validation


@dataclass
class ScalerState:
    mean: dict[str, float]
    std: dict[str, float]

    def to_json(self) -> str:
        return json.dumps({k: {"mean": self.mean[k], "std": self.std[k]} for k in self.mean}, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ScalerState":
        doc = json.loads(text)
        return cls(mean={k: v["mean"] for k, v in doc.items()}, std={k: v["std"] for k, v in doc.items()})

    def transform(self, data: Dataset) -> Dataset:
        rows = data.rows.copy()
        for j, f in enumerate(data.schema):
            if f.name in self.mean:
                rows[:, j] = (rows[:, j] - self.mean[f.name]) / self.std[f.name]
        return replace(data, rows=rows)

    def inverse_transform(self, data: Dataset) -> Dataset:
        rows = data.rows.copy()
        for j, f in enumerate(data.schema):
            if f.name in self.mean:
                rows[:, j] = rows[:, j] * self.std[f.name] + self.mean[f.name]
        return replace(data, rows=rows)


def _is_float(token: str) -> bool:
    try:
        float(token)
    except ValueError:
        return False
    return True


def _parse_cell(token: str, meta: FeatureMeta, line: int) -> float:
    token = token.strip()
    if token in MISSING_TOKENS:
        return math.nan
    if not meta.is_numeric:
        try:
            return float(meta.categories.index(token))
        except ValueError:
            raise SchemaError(f"line {line}: unknown category {token!r} for {meta.name!r}") from None
    try:
        return float(token)
    except ValueError:
        raise ParseError(f"non-numeric value {token!r} in numeric column {meta.name!r}", line) from None


def load_csv(
    path: str | Path,
    label: str,
    schema_hint: Sequence[FeatureMeta] | None = None,
) -> Dataset:
    """Read a headered CSV; ``label`` names the class column.

    Columns absent from ``schema_hint`` are inferred; categorical category
    indices follow the sorted token order.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError("missing header row", 1) from None
        if label not in header:
            raise SchemaError(f"label column {label!r} not in header")
        lab_col = header.index(label)
        feat_cols = [c for i, c in enumerate(header) if i != lab_col]
        hint = {f.name: f for f in schema_hint} if schema_hint else None
        if hint is not None:
            missing = set(feat_cols) - set(hint)
            if missing:
                raise SchemaError(f"schema_hint lacks columns {sorted(missing)}")

        raw_rows: list[list[str]] = []
        raw_labels: list[str] = []
        lines: list[int] = []
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(rec)}", lineno)
            raw_labels.append(rec[lab_col].strip())
            raw_rows.append([c for i, c in enumerate(rec) if i != lab_col])
            lines.append(lineno)

    # Without a hint a column is categorical only when most of its tokens are
    # non-numeric; a stray bad token in a numeric column is a parse error.
    schema: list[FeatureMeta] = []
    for j, col in enumerate(feat_cols):
        if hint is not None:
            schema.append(hint[col])
            continue
        toks = [r[j].strip() for r in raw_rows if r[j].strip() not in MISSING_TOKENS]
        n_num = sum(_is_float(t) for t in toks)
        if toks and 2 * n_num < len(toks):
            schema.append(FeatureMeta(col, "categorical", categories=tuple(sorted(set(toks)))))
        else:
            schema.append(FeatureMeta(col, "numeric"))

    values = np.empty((len(raw_rows), len(feat_cols)))
    for j, meta in enumerate(schema):
        for i, r in enumerate(raw_rows):
            values[i, j] = _parse_cell(r[j], meta, lines[i])
    for j, meta in enumerate(schema):
        if meta.is_numeric and hint is None:
            finite = values[:, j][np.isfinite(values[:, j])]
            if finite.size:
                schema[j] = FeatureMeta(meta.name, "numeric", float(finite.min()), float(finite.max()))

    label_values = sorted(set(raw_labels), key=_label_sort_key)
    label_map = {v: i for i, v in enumerate(label_values)}
    labels = np.array([label_map[v] for v in raw_labels], dtype=int)
    return Dataset(schema, values, labels, np.arange(len(raw_rows)), num_classes=max(len(label_values), 2))


def _label_sort_key(v: str):
    try:
        return (0, float(v), v)
    except ValueError:
        return (1, 0.0, v)


def preprocess(raw: Dataset, outlier_z: float = 3.0) -> tuple[Dataset, ScalerState]:
    """Drop missing rows and numeric z-score outliers, then standard-scale.

    Zero-variance numeric features are dropped (and listed in
    ``dropped_features``). Categorical features pass through untouched.
    """
    if len(raw) == 0:
        raise EmptyDatasetError("empty input dataset")
    keep = ~np.isnan(raw.rows).any(axis=1)
    data = raw.subset(keep)
    if len(data) == 0:
        raise EmptyDatasetError("every row has a missing value")

    num = data.numeric_mask
    if math.isfinite(outlier_z) and num.any():
        x = data.rows[:, num]
        mu, sd = x.mean(axis=0), x.std(axis=0)
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.where(sd > 0, np.abs(x - mu) / np.where(sd > 0, sd, 1.0), 0.0)
        data = data.subset(~(z > outlier_z).any(axis=1))
        if len(data) == 0:
            raise EmptyDatasetError("outlier filter removed every row")

    schema, cols, dropped = [], [], list(raw.dropped_features)
    mean, std = {}, {}
    for j, f in enumerate(data.schema):
        col = data.rows[:, j]
        if not f.is_numeric:
            schema.append(f)
            cols.append(col)
            continue
        m, s = float(col.mean()), float(col.std())
        if s <= 0.0:
            logger.warning("dropping zero-variance feature %s", f.name)
            dropped.append(f.name)
            continue
        scaled = (col - m) / s
        mean[f.name], std[f.name] = m, s
        schema.append(FeatureMeta(f.name, "numeric", float(scaled.min()), float(scaled.max())))
        cols.append(scaled)
    if not schema:
        raise EmptyDatasetError("no features left after dropping constant columns")
    rows = np.column_stack(cols)
    out = Dataset(schema, rows, data.labels, data.row_ids, num_classes=raw.num_classes, dropped_features=dropped)
    return out, ScalerState(mean, std)


def split_45_45_10(data: Dataset, seed: int = 0) -> DataSplits:
    n = len(data)
    if n < 10:
        raise SizeError(f"need at least 10 rows to split, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    n_tr = n_sh = int(math.floor(0.45 * n))
    return DataSplits(
        target_train=data.subset(np.sort(perm[:n_tr])),
        shadow_pool=data.subset(np.sort(perm[n_tr : n_tr + n_sh])),
        validation=data.subset(np.sort(perm[n_tr + n_sh :])),
    )


def make_surrogate(
    n: int = 5000,
    d: int = 14,
    seed: int = 0,
    components: int = 6,
    spread: float = 2.4,
    scale: float = 1.0,
    label_noise: float = 0.04,
) -> Dataset:
    """Two-class Gaussian mixture standing in for the EEG eye-state data.

    Each class is a mixture of ``components`` isotropic Gaussians whose
    centres are drawn with per-coordinate stddev ``spread``; a fraction
    ``label_noise`` of labels is flipped so a flexible model can memorise
    individual records.
    """
    rng = np.random.default_rng(seed)
    centres = rng.normal(0.0, spread, size=(2, components, d))
    labels = rng.integers(0, 2, size=n)
    comp = rng.integers(0, components, size=n)
    rows = centres[labels, comp] + rng.normal(0.0, scale, size=(n, d))
    flip = rng.random(n) < label_noise
    labels = np.where(flip, 1 - labels, labels)
    schema = [FeatureMeta(f"f{j}", "numeric", float(rows[:, j].min()), float(rows[:, j].max())) for j in range(d)]
    return Dataset(schema, rows, labels, np.arange(n), num_classes=2)


def write_dataset_csv(data: Dataset, path: str | Path, label: str = "label") -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["row_id", *[f.name for f in data.schema], label])
        for rid, row, y in zip(data.row_ids, data.rows, data.labels):
            cells = []
            for f, v in zip(data.schema, row):
                cells.append(f.categories[int(v)] if not f.is_numeric else repr(float(v)))
            w.writerow([int(rid), *cells, int(y)])


def read_dataset_csv(path: str | Path, schema: Sequence[FeatureMeta], num_classes: int, label: str = "label") -> Dataset:
    """Inverse of :func:`write_dataset_csv` (keeps the stored row ids)."""
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        ids, rows, labels = [], [], []
        for rec in reader:
            ids.append(int(rec["row_id"]))
            labels.append(int(rec[label]))
            rows.append([
                float(rec[f.name]) if f.is_numeric else float(f.categories.index(rec[f.name])) for f in schema
            ])
    return Dataset(list(schema), np.array(rows).reshape(-1, len(schema)), labels, ids, num_classes=num_classes)


def schema_to_json(schema: Sequence[FeatureMeta]) -> list[dict]:
    return [
        {"name": f.name, "kind": f.kind, "observed_min": f.observed_min, "observed_max": f.observed_max,
         "categories": list(f.categories)}
        for f in schema
    ]


def schema_from_json(doc: list[dict]) -> list[FeatureMeta]:
    return [
        FeatureMeta(f["name"], f["kind"], f["observed_min"], f["observed_max"], tuple(f["categories"]))
        for f in doc
    ]
