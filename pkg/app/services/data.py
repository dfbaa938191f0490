"""Dataset ingestion, schema handling, preprocessing and stratified splits."""

import json
import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from app.errors import DataError, ParseError, SchemaError, SplitError

logger = logging.getLogger(__name__)

MISSING_TOKENS = frozenset({"", "NA", "?"})


class FeatureKindEnum(str, Enum):
    numerical = "numerical"
    categorical = "categorical"


# Schema document (JSON file)


class FeatureSpec(BaseModel):
    name: str = Field(..., min_length=1, description="Column name in the CSV header")
    kind: FeatureKindEnum = Field(..., description="numerical or categorical")
    categories: Optional[List[str]] = Field(
        None,
        description="Explicit category labels, coded in the order given; learned from training data and sorted when omitted",
    )

    @model_validator(mode="after")
    def categories_only_for_categorical(self):
        if self.categories is not None:
            if self.kind != FeatureKindEnum.categorical:
                raise ValueError(f"feature '{self.name}': only categorical features take categories")
            if len(set(self.categories)) != len(self.categories):
                raise ValueError(f"feature '{self.name}': duplicate categories")
        return self


class LabelSpec(BaseModel):
    name: Optional[str] = Field(None, description="Label column name; defaults to the last column")
    classes: List[str] = Field(..., min_length=2, description="Class labels, position = class index")

    @field_validator("classes")
    @classmethod
    def unique_classes(cls, v):
        if len(set(v)) != len(v):
            raise ValueError("duplicate class labels")
        return v


class SchemaSpec(BaseModel):
    label: LabelSpec
    features: List[FeatureSpec] = Field(..., min_length=1)

    @field_validator("features")
    @classmethod
    def unique_names(cls, v):
        names = [f.name for f in v]
        if len(set(names)) != len(names):
            raise ValueError("feature names must be unique")
        return v

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "SchemaSpec":
        try:
            with open(path, encoding="utf-8") as fh:
                return cls.model_validate(json.load(fh))
        except FileNotFoundError:
            raise DataError(f"schema file not found: {path}")
        except (json.JSONDecodeError, ValidationError) as e:
            raise SchemaError(f"invalid schema file {path}: {e}")


# In-memory types


@dataclass(frozen=True)
class FeatureInfo:
    name: str
    kind: FeatureKindEnum
    index: int
    categories: Tuple[str, ...] = ()

    @property
    def is_categorical(self) -> bool:
        return self.kind == FeatureKindEnum.categorical

    @property
    def k(self) -> int:
        """Category count; the padding code is ``k`` itself."""
        return len(self.categories)


@dataclass(frozen=True)
class FeatureSchema:
    features: Tuple[FeatureInfo, ...]
    class_names: Tuple[str, ...]
    label_name: Optional[str] = None

    def __post_init__(self):
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise SchemaError("feature names must be unique")

    @classmethod
    def from_spec(cls, spec: SchemaSpec) -> "FeatureSchema":
        return cls(
            features=tuple(
                FeatureInfo(f.name, f.kind, i, tuple(f.categories or ())) for i, f in enumerate(spec.features)
            ),
            class_names=tuple(spec.label.classes),
            label_name=spec.label.name,
        )

    @property
    def names(self) -> List[str]:
        return [f.name for f in self.features]

    @property
    def n_features(self) -> int:
        return len(self.features)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def numerical_indices(self) -> np.ndarray:
        return np.array([f.index for f in self.features if not f.is_categorical], dtype=np.intp)

    @property
    def categorical_indices(self) -> np.ndarray:
        return np.array([f.index for f in self.features if f.is_categorical], dtype=np.intp)

    def with_categories(self, tables: Mapping[int, Sequence[str]]) -> "FeatureSchema":
        features = tuple(
            replace(f, categories=tuple(tables[f.index])) if f.index in tables else f for f in self.features
        )
        return replace(self, features=features)

    def same_layout(self, other: "FeatureSchema") -> bool:
        """Names, kinds and classes agree (category tables may differ)."""
        return (
            [(f.name, f.kind) for f in self.features] == [(f.name, f.kind) for f in other.features]
            and self.class_names == other.class_names
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "label": {"name": self.label_name, "classes": list(self.class_names)},
            "features": [
                {"name": f.name, "kind": f.kind.value, **({"categories": list(f.categories)} if f.is_categorical else {})}
                for f in self.features
            ],
        }

    @classmethod
    def from_dict(cls, payload: Mapping[str, Any]) -> "FeatureSchema":
        return cls.from_spec(SchemaSpec.model_validate(payload))


@dataclass(frozen=True)
class TabularDataset:
    """Samples x features grids plus labels.

    Until preprocessing, categorical cells live as strings in ``raw`` and hold NaN in
    ``values``. After preprocessing ``raw`` is None and categorical cells hold codes.
    """

    values: np.ndarray
    present: np.ndarray
    labels: np.ndarray
    schema: FeatureSchema
    raw: Optional[np.ndarray] = field(default=None, compare=False)

    def __post_init__(self):
        if self.values.shape != self.present.shape:
            raise DataError(f"values {self.values.shape} and present {self.present.shape} differ in shape")
        if self.values.ndim != 2 or self.values.shape[1] != self.schema.n_features:
            raise SchemaError(f"grid of shape {self.values.shape} for {self.schema.n_features} features")
        if self.labels.shape != (self.values.shape[0],):
            raise DataError(f"{self.labels.shape[0]} labels for {self.values.shape[0]} samples")

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def encoded(self) -> bool:
        return self.raw is None

    @property
    def missing_count(self) -> int:
        return int((~self.present).sum())

    def take(self, indices: Sequence[int]) -> "TabularDataset":
        idx = np.asarray(indices, dtype=np.intp)
        return TabularDataset(
            values=self.values[idx],
            present=self.present[idx],
            labels=self.labels[idx],
            schema=self.schema,
            raw=None if self.raw is None else self.raw[idx],
        )

    def with_present(self, present: np.ndarray) -> "TabularDataset":
        return replace(self, present=present)


def concat_datasets(first: TabularDataset, second: TabularDataset) -> TabularDataset:
    if first.schema != second.schema or first.encoded != second.encoded:
        raise SchemaError("cannot concatenate datasets with different schemas")
    return TabularDataset(
        values=np.concatenate([first.values, second.values]),
        present=np.concatenate([first.present, second.present]),
        labels=np.concatenate([first.labels, second.labels]),
        schema=first.schema,
        raw=None if first.raw is None else np.concatenate([first.raw, second.raw]),
    )


# Loading


def _is_missing(column: pd.Series) -> np.ndarray:
    return column.str.strip().isin(MISSING_TOKENS).to_numpy()


def _frame_to_dataset(frame: pd.DataFrame, schema: FeatureSchema, line_offset: int) -> TabularDataset:
    n = len(frame)
    m = schema.n_features
    values = np.full((n, m), np.nan)
    present = np.zeros((n, m), dtype=bool)
    raw = np.full((n, m), None, dtype=object)

    for feature in schema.features:
        column = frame[feature.name].astype(str)
        missing = _is_missing(column)
        present[:, feature.index] = ~missing
        stripped = column.str.strip()
        if feature.is_categorical:
            raw[~missing, feature.index] = stripped[~missing].to_numpy()
            continue
        parsed = pd.to_numeric(stripped.where(~missing), errors="coerce").to_numpy(dtype=float)
        bad = ~missing & ~np.isfinite(parsed)
        if bad.any():
            row = int(np.flatnonzero(bad)[0])
            raise ParseError(
                f"cannot parse '{column.iloc[row]}' as a number in column '{feature.name}'",
                line=row + line_offset,
                column=feature.name,
            )
        values[~missing, feature.index] = parsed[~missing]

    return TabularDataset(values=values, present=present, labels=np.zeros(n, dtype=np.intp), schema=schema, raw=raw)


def _parse_labels(column: pd.Series, schema: FeatureSchema, line_offset: int) -> np.ndarray:
    lookup = {name: i for i, name in enumerate(schema.class_names)}
    stripped = column.astype(str).str.strip()
    labels = stripped.map(lookup)
    bad = labels.isna().to_numpy()
    if bad.any():
        row = int(np.flatnonzero(bad)[0])
        token = stripped.iloc[row]
        reason = "missing label" if token in MISSING_TOKENS else f"unknown class '{token}'"
        raise ParseError(f"{reason} in label column", line=row + line_offset)
    return labels.to_numpy(dtype=np.intp)


def load_csv(path: Union[str, Path], schema_spec: Union[SchemaSpec, FeatureSchema]) -> TabularDataset:
    """Read a UTF-8 CSV with one header row into an unencoded dataset.

    Empty cells, ``NA`` and ``?`` are missing. Line numbers in parse errors count the
    header as line 1.
    """
    schema = FeatureSchema.from_spec(schema_spec) if isinstance(schema_spec, SchemaSpec) else schema_spec
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, na_filter=False, encoding="utf-8")
    except FileNotFoundError:
        raise DataError(f"data file not found: {path}")
    except pd.errors.EmptyDataError:
        raise SchemaError(f"{path} has no header row")
    except (pd.errors.ParserError, UnicodeDecodeError) as e:
        raise ParseError(f"malformed CSV {path}: {e}")

    header = [str(c).strip() for c in frame.columns]
    frame.columns = header
    if len(set(header)) != len(header):
        raise SchemaError(f"duplicate column names in {path}")
    label_name = schema.label_name or (header[-1] if header else None)
    expected = set(schema.names) | {label_name}
    unknown = [c for c in header if c not in expected]
    absent = [c for c in expected if c not in header]
    if unknown or absent:
        raise SchemaError(
            f"header of {path} does not match the schema", unknown=unknown, missing=sorted(absent, key=str)
        )

    dataset = _frame_to_dataset(frame, schema, line_offset=2)
    labels = _parse_labels(frame[label_name], schema, line_offset=2)
    logger.info(f"📄 Loaded {len(frame)} samples x {schema.n_features} features from {path}")
    return replace(dataset, labels=labels)


def dataset_from_records(
    records: Sequence[Mapping[str, Any]], schema: FeatureSchema
) -> TabularDataset:
    """Build an unencoded, unlabeled dataset from dicts of raw values (None = missing)."""
    known = set(schema.names)
    for i, record in enumerate(records):
        unknown = sorted(set(record) - known)
        if unknown:
            raise SchemaError(f"record {i} has unknown features: {', '.join(unknown)}", record=i)
    frame = pd.DataFrame(
        [{name: "" if record.get(name) is None else str(record.get(name)) for name in schema.names} for record in records],
        columns=schema.names,
        dtype=str,
    )
    return _frame_to_dataset(frame, schema, line_offset=0)


# Preprocessing


@dataclass(frozen=True)
class NumericRange:
    low: float
    high: float

    @property
    def degenerate(self) -> bool:
        return not (self.high > self.low)


@dataclass(frozen=True)
class Preprocessor:
    schema: FeatureSchema
    ranges: Dict[int, NumericRange]
    tables: Dict[int, Tuple[str, ...]]

    @property
    def encoded_schema(self) -> FeatureSchema:
        return self.schema.with_categories(self.tables)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "schema": self.schema.to_dict(),
            "ranges": {str(i): [r.low, r.high] for i, r in self.ranges.items()},
            "tables": {str(i): list(t) for i, t in self.tables.items()},
        }

    @classmethod
    def from_dict(cls, payload: Mapping[str, Any]) -> "Preprocessor":
        return cls(
            schema=FeatureSchema.from_dict(payload["schema"]),
            ranges={int(i): NumericRange(float(lo), float(hi)) for i, (lo, hi) in payload["ranges"].items()},
            tables={int(i): tuple(t) for i, t in payload["tables"].items()},
        )


def fit_preprocessor(train: TabularDataset) -> Preprocessor:
    """Min/max over observed numerical cells; label tables for categoricals.

    Learned tables are sorted. A schema's explicit `categories` are kept in the
    order given.
    """
    if train.encoded:
        raise DataError("fit_preprocessor expects a raw (unencoded) dataset")
    ranges: Dict[int, NumericRange] = {}
    tables: Dict[int, Tuple[str, ...]] = {}
    for feature in train.schema.features:
        observed = train.present[:, feature.index]
        if feature.is_categorical:
            if feature.categories:
                tables[feature.index] = feature.categories
            else:
                tables[feature.index] = tuple(sorted(set(train.raw[observed, feature.index])))
            continue
        column = train.values[observed, feature.index]
        if column.size == 0:
            logger.warning(f"⚠️ Feature '{feature.name}' has no observed values; its range is degenerate")
            ranges[feature.index] = NumericRange(math.nan, math.nan)
        else:
            ranges[feature.index] = NumericRange(float(column.min()), float(column.max()))
    return Preprocessor(schema=train.schema, ranges=ranges, tables=tables)


def apply_preprocessor(p: Preprocessor, d: TabularDataset) -> TabularDataset:
    """Normalize numericals to [0,1] (clamped) and code categoricals.

    Unseen categories become missing. Missing cells hold NaN afterwards.
    """
    if d.encoded:
        raise DataError("dataset is already preprocessed; apply the preprocessor exactly once")
    if not p.schema.same_layout(d.schema):
        raise SchemaError("dataset schema does not match the preprocessor")

    values = np.full(d.values.shape, np.nan)
    present = d.present.copy()
    for feature in d.schema.features:
        col = feature.index
        observed = d.present[:, col]
        if feature.is_categorical:
            lookup = {label: code for code, label in enumerate(p.tables[col])}
            codes = np.array([lookup.get(label, -1) if ok else -1 for label, ok in zip(d.raw[:, col], observed)])
            unseen = observed & (codes < 0)
            if unseen.any():
                logger.debug(f"Feature '{feature.name}': {int(unseen.sum())} unseen categories marked missing")
            present[:, col] = codes >= 0
            values[present[:, col], col] = codes[present[:, col]]
            continue
        r = p.ranges[col]
        if r.degenerate:
            values[observed, col] = 0.5
        else:
            values[observed, col] = np.clip((d.values[observed, col] - r.low) / (r.high - r.low), 0.0, 1.0)

    return TabularDataset(values=values, present=present, labels=d.labels.copy(), schema=p.encoded_schema)


def label_column(path: Union[str, Path], schema: FeatureSchema) -> str:
    """Label column of a CSV: the schema's name, else the last header column."""
    if schema.label_name:
        return schema.label_name
    try:
        header = pd.read_csv(path, dtype=str, nrows=0, encoding="utf-8").columns
    except (FileNotFoundError, pd.errors.EmptyDataError):
        return "label"
    return str(header[-1]).strip() if len(header) else "label"


def restore_raw(p: Preprocessor, d: TabularDataset, label_name: Optional[str] = None) -> pd.DataFrame:
    """Map an encoded dataset back to original units and labels (missing cells empty).

    A numerical feature never observed during fitting has no original units; its
    values are written on the unit scale.
    """
    columns: Dict[str, List[Any]] = {}
    for feature in d.schema.features:
        col = feature.index
        observed = d.present[:, col]
        if feature.is_categorical:
            table = p.tables[col]
            columns[feature.name] = [table[int(v)] if ok else "" for v, ok in zip(d.values[:, col], observed)]
        else:
            r = p.ranges[col]
            if not np.isfinite(r.low):
                scaled = d.values[:, col]
            elif r.degenerate:
                scaled = np.full(len(d), r.low)
            else:
                scaled = d.values[:, col] * (r.high - r.low) + r.low
            columns[feature.name] = [float(v) if ok and np.isfinite(v) else "" for v, ok in zip(scaled, observed)]
    frame = pd.DataFrame(columns, columns=d.schema.names)
    frame[label_name or d.schema.label_name or "label"] = [d.schema.class_names[i] for i in d.labels]
    return frame


# Cross-validation


@dataclass(frozen=True)
class Fold:
    test: np.ndarray
    train: np.ndarray
    validation: np.ndarray


@dataclass(frozen=True)
class FoldPlan:
    k: int
    seed: int
    folds: Tuple[Fold, ...]


def stratified_kfold(
    labels: Sequence[int], k: int, seed: int, validation_fraction: float = 0.2
) -> FoldPlan:
    """Stratified k folds with a stratified validation carve-out from each training part.

    Each class is shuffled and dealt round-robin into folds; the dealing position
    carries over between classes so fold sizes stay balanced.
    """
    labels = np.asarray(labels, dtype=np.intp)
    if k < 2:
        raise SplitError(f"need at least 2 folds, got {k}")
    if not 0.0 <= validation_fraction < 1.0:
        raise SplitError(f"validation fraction {validation_fraction} outside [0, 1)")
    classes, counts = np.unique(labels, return_counts=True)
    for cls, count in zip(classes, counts):
        if count < k:
            raise SplitError(f"class {int(cls)} has {int(count)} samples, fewer than {k} folds", label=int(cls))

    rng = np.random.default_rng(seed)
    assignment = np.empty(labels.shape[0], dtype=np.intp)
    offset = 0
    for cls in classes:
        members = rng.permutation(np.flatnonzero(labels == cls))
        assignment[members] = (np.arange(members.size) + offset) % k
        offset = (offset + members.size) % k

    folds = []
    for f in range(k):
        test = np.flatnonzero(assignment == f)
        rest = np.flatnonzero(assignment != f)
        validation = []
        for cls in classes:
            members = rng.permutation(rest[labels[rest] == cls])
            n_val = int(math.floor(validation_fraction * members.size + 0.5))
            if validation_fraction > 0 and members.size > 1:
                n_val = max(1, n_val)
            validation.append(members[:n_val])
        validation = np.sort(np.concatenate(validation)) if validation else np.array([], dtype=np.intp)
        train = np.setdiff1d(rest, validation)
        folds.append(Fold(test=test, train=train, validation=validation))

    return FoldPlan(k=k, seed=seed, folds=tuple(folds))
