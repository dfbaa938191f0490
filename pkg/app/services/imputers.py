"""Mean/mode and k-nearest-neighbour imputation baselines on preprocessed data."""

import logging
from dataclasses import dataclass
from enum import Enum

import numpy as np

from app.errors import ContractError, DataError
from app.services.data import TabularDataset

logger = logging.getLogger(__name__)


class ImputerEnum(str, Enum):
    mean = "mean"
    knn = "knn"


@dataclass(frozen=True)
class MeanImputerState:
    fill: np.ndarray


@dataclass(frozen=True)
class KnnImputerState:
    values: np.ndarray
    present: np.ndarray
    categorical: np.ndarray
    k: int
    fallback: MeanImputerState


def _require_encoded(d: TabularDataset) -> None:
    if not d.encoded:
        raise DataError("imputers work on preprocessed datasets")


def _mode(codes: np.ndarray) -> float:
    """Most frequent code; ties go to the smallest code."""
    uniques, counts = np.unique(codes, return_counts=True)
    return float(uniques[np.argmax(counts)])


def fit_mean(train: TabularDataset) -> MeanImputerState:
    """Column means for numericals, modes for categoricals.

    A categorical feature with an empty category table has no code to fill with;
    its fill is NaN and its cells stay missing.
    """
    _require_encoded(train)
    fill = np.empty(train.schema.n_features)
    for feature in train.schema.features:
        column = train.values[train.present[:, feature.index], feature.index]
        if column.size == 0:
            if feature.is_categorical:
                fill[feature.index] = 0.0 if feature.k > 0 else np.nan
            else:
                fill[feature.index] = 0.5
        elif feature.is_categorical:
            fill[feature.index] = _mode(column)
        else:
            fill[feature.index] = column.mean()
    return MeanImputerState(fill=fill)


def _fillable(state: MeanImputerState) -> np.ndarray:
    return ~np.isnan(state.fill)


def apply_mean(state: MeanImputerState, d: TabularDataset) -> TabularDataset:
    _require_encoded(d)
    values = np.where(d.present, d.values, state.fill[None, :])
    present = d.present | _fillable(state)[None, :]
    return TabularDataset(values=values, present=present, labels=d.labels, schema=d.schema)


def fit_knn(train: TabularDataset, k: int = 5) -> KnnImputerState:
    _require_encoded(train)
    if len(train) == 0:
        raise DataError("cannot fit a KNN imputer on an empty training set")
    if not 1 <= k <= len(train):
        raise ContractError(f"k={k} must lie in [1, {len(train)}]")
    categorical = np.array([f.is_categorical for f in train.schema.features])
    return KnnImputerState(
        values=np.where(train.present, train.values, 0.0),
        present=train.present.copy(),
        categorical=categorical,
        k=k,
        fallback=fit_mean(train),
    )


def knn_distances(state: KnnImputerState, values: np.ndarray, present: np.ndarray) -> np.ndarray:
    """Root-mean-square difference over coordinates observed by both rows.

    Categorical coordinates contribute 0 when the codes agree and 1 otherwise. Rows
    sharing no observed coordinate are at infinite distance.
    """
    shared = state.present & present[None, :]
    diff = state.values - np.where(present, values, 0.0)[None, :]
    squared = np.where(state.categorical[None, :], (diff != 0).astype(float), diff * diff)
    counts = shared.sum(axis=1)
    total = np.where(shared, squared, 0.0).sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(counts > 0, np.sqrt(total / np.maximum(counts, 1)), np.inf)


def apply_knn(state: KnnImputerState, d: TabularDataset) -> TabularDataset:
    """Fill each missing cell from the k nearest training rows that observe it."""
    _require_encoded(d)
    values = np.where(d.present, d.values, 0.0)
    fallbacks = 0
    for row in np.flatnonzero(~d.present.all(axis=1)):
        distances = knn_distances(state, values[row], d.present[row])
        order = np.argsort(distances, kind="stable")
        for col in np.flatnonzero(~d.present[row]):
            ranked = order[state.present[order, col] & np.isfinite(distances[order])]
            if ranked.size == 0:
                values[row, col] = state.fallback.fill[col]
                fallbacks += 1
                continue
            neighbours = state.values[ranked[: state.k], col]
            values[row, col] = _mode(neighbours) if state.categorical[col] else neighbours.mean()
    if fallbacks:
        logger.debug(f"KNN imputer fell back to the mean for {fallbacks} cells")
    present = d.present | _fillable(state.fallback)[None, :]
    return TabularDataset(values=values, present=present, labels=d.labels, schema=d.schema)


def fit_imputer(kind: ImputerEnum, train: TabularDataset, k: int = 5):
    return fit_mean(train) if kind == ImputerEnum.mean else fit_knn(train, min(k, len(train)))


def apply_imputer(state, d: TabularDataset) -> TabularDataset:
    return apply_mean(state, d) if isinstance(state, MeanImputerState) else apply_knn(state, d)
