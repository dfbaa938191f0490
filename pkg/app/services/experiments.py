"""Cross-validated missingness grids: one cell = (method, train%, test%, fold)."""

import hashlib
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, ValidationError, field_validator

from app import __version__
from app.errors import DataError, NaimError, UsageError
from app.services.data import (
    FoldPlan,
    SchemaSpec,
    TabularDataset,
    apply_preprocessor,
    concat_datasets,
    fit_preprocessor,
    load_csv,
    stratified_kfold,
)
from app.services.imputers import ImputerEnum, apply_imputer, fit_imputer
from app.services.metrics import (
    ScoredFold,
    aggregate_grid,
    average_methods,
    cells_frame,
    compare_methods,
    format_grid,
    robustness,
)
from app.services.missingness import McarSpec, inject_mcar
from app.services.model import NaimConfig, init_parameters, predict_proba_batch
from app.services.trainer import TrainConfig, TrainHistory, train

logger = logging.getLogger(__name__)

DEFAULT_MISSING_GRID = [0.0, 0.05, 0.10, 0.25, 0.50, 0.75]


class MethodEnum(str, Enum):
    naim = "naim"
    naim_no_reg = "naim-no-reg"
    naim_no_reg_mean = "naim-no-reg+mean"
    naim_no_reg_knn = "naim-no-reg+knn"

    @property
    def augmentation(self) -> bool:
        return self == MethodEnum.naim

    @property
    def imputer(self) -> Optional[ImputerEnum]:
        return {
            MethodEnum.naim_no_reg_mean: ImputerEnum.mean,
            MethodEnum.naim_no_reg_knn: ImputerEnum.knn,
        }.get(self)


class ExperimentConfig(BaseModel):
    dataset_path: str = Field(..., description="CSV file with one header row")
    schema_path: str = Field(..., description="Schema JSON document")
    model: NaimConfig = Field(default_factory=NaimConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    methods: List[MethodEnum] = Field(default_factory=lambda: [MethodEnum.naim], min_length=1)
    train_missing: List[float] = Field(default_factory=lambda: list(DEFAULT_MISSING_GRID), min_length=1)
    test_missing: List[float] = Field(default_factory=lambda: list(DEFAULT_MISSING_GRID), min_length=1)
    validation_missing: Literal["train", "test"] = Field(
        "train", description="Which rate the validation split is injected at"
    )
    folds: int = Field(5, ge=2)
    knn_k: int = Field(5, ge=1)
    seed: int = Field(0, ge=0, lt=2**64)
    output_dir: str = Field("results")

    @field_validator("train_missing", "test_missing")
    @classmethod
    def fractions_in_range(cls, v):
        for p in v:
            if not 0.0 <= p < 1.0:
                raise ValueError(f"missing fraction {p} outside [0, 1)")
        return sorted(set(v))

    @classmethod
    def from_file(cls, path: str, **overrides) -> "ExperimentConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                payload = json.load(fh)
        except FileNotFoundError:
            raise UsageError(f"config file not found: {path}")
        except json.JSONDecodeError as e:
            raise UsageError(f"config {path} is not valid JSON: {e}")
        payload.update({k: v for k, v in overrides.items() if v is not None})
        try:
            return cls.model_validate(payload)
        except ValidationError as e:
            raise UsageError(f"invalid config {path}: {e}")


@dataclass(frozen=True)
class CellKey:
    method: MethodEnum
    train_missing: float
    test_missing: float
    fold: int

    @property
    def cell_id(self) -> str:
        return (
            f"{self.method.value}_tr{round(self.train_missing * 100):02d}"
            f"_te{round(self.test_missing * 100):02d}_f{self.fold}"
        )


def derive_seed(master: int, *parts) -> int:
    """Stable 64-bit seed: blake2b over the master seed and the canonical part strings."""
    text = "|".join([str(master)] + [f"{p:.6f}" if isinstance(p, float) else str(getattr(p, "value", p)) for p in parts])
    return int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest(), "little")


def cell_seeds(master: int, key: CellKey) -> Dict[str, int]:
    """Data seeds ignore the method so every method sees the same missing cells."""
    return {
        "split": derive_seed(master, "split"),
        "train_mcar": derive_seed(master, "train-mcar", key.train_missing, key.fold),
        "validation_mcar": derive_seed(master, "validation-mcar", key.train_missing, key.test_missing, key.fold),
        "test_mcar": derive_seed(master, "test-mcar", key.train_missing, key.test_missing, key.fold),
        "model": derive_seed(master, key.train_missing, key.test_missing, key.fold, key.method),
    }


def schedule(config: ExperimentConfig) -> List[CellKey]:
    return [
        CellKey(method, train_p, test_p, fold)
        for method in config.methods
        for train_p in config.train_missing
        for test_p in config.test_missing
        for fold in range(config.folds)
    ]


def load_experiment_data(config: ExperimentConfig) -> TabularDataset:
    return load_csv(config.dataset_path, SchemaSpec.from_file(config.schema_path))


def fold_plan(config: ExperimentConfig, dataset: TabularDataset) -> FoldPlan:
    return stratified_kfold(dataset.labels, config.folds, derive_seed(config.seed, "split"))


def _inject(d: TabularDataset, p: float, seed: int) -> TabularDataset:
    return inject_mcar(d, McarSpec(p=p, seed=seed)) if p > 0 else d


@dataclass
class CellOutcome:
    key: CellKey
    seeds: Dict[str, int]
    scored: ScoredFold
    history: TrainHistory


def run_cell(
    config: ExperimentConfig,
    key: CellKey,
    dataset: Optional[TabularDataset] = None,
    plan: Optional[FoldPlan] = None,
) -> CellOutcome:
    """Split, inject, preprocess, (impute), train and score one cell."""
    dataset = dataset if dataset is not None else load_experiment_data(config)
    plan = plan if plan is not None else fold_plan(config, dataset)
    if not 0 <= key.fold < plan.k:
        raise UsageError(f"fold {key.fold} outside [0, {plan.k})")
    seeds = cell_seeds(config.seed, key)
    fold = plan.folds[key.fold]

    train_raw, val_raw, test_raw = dataset.take(fold.train), dataset.take(fold.validation), dataset.take(fold.test)
    if config.validation_missing == "train":
        joined = _inject(concat_datasets(train_raw, val_raw), key.train_missing, seeds["train_mcar"])
        train_raw = joined.take(np.arange(len(train_raw)))
        val_raw = joined.take(np.arange(len(train_raw), len(joined)))
    else:
        train_raw = _inject(train_raw, key.train_missing, seeds["train_mcar"])
        val_raw = _inject(val_raw, key.test_missing, seeds["validation_mcar"])
    test_raw = _inject(test_raw, key.test_missing, seeds["test_mcar"])

    preprocessor = fit_preprocessor(train_raw)
    train_set, val_set, test_set = (apply_preprocessor(preprocessor, d) for d in (train_raw, val_raw, test_raw))

    if key.method.imputer is not None:
        imputer = fit_imputer(key.method.imputer, train_set, config.knn_k)
        train_set, val_set, test_set = (apply_imputer(imputer, d) for d in (train_set, val_set, test_set))

    model_config = config.model.model_copy(update={"n_classes": train_set.schema.n_classes})
    train_config = config.train.model_copy(
        update={"augmentation_enabled": key.method.augmentation, "seed": seeds["model"]}
    )
    params = init_parameters(model_config, train_set.schema, seeds["model"])
    best, history = train(params, train_set, val_set, train_config)

    probs = predict_proba_batch(best, test_set.values, test_set.present)
    scored = ScoredFold(key.method.value, key.train_missing, key.test_missing, key.fold, probs[:, 1], test_set.labels)
    return CellOutcome(key=key, seeds=seeds, scored=scored, history=history)


# Grid


class CellRecord(BaseModel):
    cell_id: str
    method: MethodEnum
    train_missing: float
    test_missing: float
    fold: int
    seeds: Dict[str, int]
    status: Literal["ok", "failed"]
    auc: Optional[float] = None
    epochs: Optional[int] = None
    error: Optional[Dict] = None
    wall_clock_s: float


class RunManifest(BaseModel):
    version: str = __version__
    started_at: str
    finished_at: Optional[str] = None
    config: Dict
    cells: List[CellRecord] = Field(default_factory=list)


@dataclass
class GridReport:
    output_dir: Path
    results: List[ScoredFold]
    manifest: RunManifest

    @property
    def failed(self) -> List[CellRecord]:
        return [c for c in self.manifest.cells if c.status == "failed"]


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _cell_task(config: ExperimentConfig, key: CellKey, dataset: TabularDataset, plan: FoldPlan, out: Path):
    """Run one cell and persist its history; failures become failed records."""
    started = time.time()
    record = dict(
        cell_id=key.cell_id,
        method=key.method,
        train_missing=key.train_missing,
        test_missing=key.test_missing,
        fold=key.fold,
        seeds=cell_seeds(config.seed, key),
    )
    logger.debug(f"Cell {key.cell_id} started")
    try:
        outcome = run_cell(config, key, dataset, plan)
    except NaimError as e:
        logger.error(f"❌ Cell {key.cell_id} failed: {e.message}")
        return key, None, CellRecord(**record, status="failed", error=e.detail, wall_clock_s=time.time() - started)
    except Exception as e:
        logger.exception(f"❌ Cell {key.cell_id} crashed")
        error = {"error": type(e).__name__, "message": str(e)}
        return key, None, CellRecord(**record, status="failed", error=error, wall_clock_s=time.time() - started)

    history_path = out / f"history_{key.cell_id}.csv"
    tmp = history_path.with_name(history_path.name + ".tmp")
    outcome.history.write_csv(tmp)
    os.replace(tmp, history_path)
    elapsed = time.time() - started
    logger.info(f"✅ Cell {key.cell_id}: AUC={outcome.scored.auc:.4f} in {elapsed:.1f}s")
    return key, outcome.scored, CellRecord(
        **record, status="ok", auc=outcome.scored.auc, epochs=len(outcome.history), wall_clock_s=elapsed
    )


def write_reports(out: Path, results: Sequence[ScoredFold]) -> None:
    """results.csv, folds.csv, grid.txt, robustness.csv and comparisons.csv."""
    ordered = sorted(results, key=lambda r: (r.method, r.train_missing, r.test_missing, r.fold))
    cells = aggregate_grid(ordered)
    cells_frame(cells).to_csv(out / "results.csv", index=False)

    folds = [
        {"method": r.method, "train_missing": r.train_missing, "test_missing": r.test_missing, "fold": r.fold, "auc": r.auc}
        for r in ordered
    ]
    pd.DataFrame(folds, columns=["method", "train_missing", "test_missing", "fold", "auc"]).to_csv(
        out / "folds.csv", index=False
    )

    imputed = [MethodEnum.naim_no_reg_mean.value, MethodEnum.naim_no_reg_knn.value]
    table_cells = cells + average_methods(cells, imputed, "naim-no-reg+imputer")
    _write_atomic(out / "grid.txt", format_grid(table_cells))

    pd.DataFrame(
        [vars(s) for s in robustness(cells)],
        columns=["method", "baseline_auc", "test_axis_drop", "train_axis_drop"],
    ).to_csv(out / "robustness.csv", index=False)
    pd.DataFrame(
        [vars(c) for c in compare_methods(ordered, MethodEnum.naim.value)],
        columns=["reference", "competitor", "cells", "win_rate", "loss_rate"],
    ).to_csv(out / "comparisons.csv", index=False)


def run_grid(config: ExperimentConfig, jobs: int = 1) -> GridReport:
    """Run every scheduled cell (in parallel processes when ``jobs`` > 1) and write reports."""
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset = load_experiment_data(config)
    plan = fold_plan(config, dataset)
    keys = schedule(config)
    manifest = RunManifest(
        started_at=datetime.now(timezone.utc).isoformat(), config=json.loads(config.model_dump_json())
    )
    logger.info(f"🚀 Running {len(keys)} cells with {jobs} job(s); writing to {out}")

    records: Dict[CellKey, CellRecord] = {}
    results: Dict[CellKey, ScoredFold] = {}
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_cell_task, config, key, dataset, plan, out) for key in keys]
            for future in as_completed(futures):
                key, scored, record = future.result()
                records[key] = record
                if scored is not None:
                    results[key] = scored
    else:
        for key in keys:
            key, scored, record = _cell_task(config, key, dataset, plan, out)
            records[key] = record
            if scored is not None:
                results[key] = scored

    manifest.cells = [records[key] for key in keys]
    manifest.finished_at = datetime.now(timezone.utc).isoformat()
    ok = [results[key] for key in keys if key in results]
    if ok:
        write_reports(out, ok)
    else:
        logger.error("❌ Every cell failed; no result tables written")
    _write_atomic(out / "manifest.json", manifest.model_dump_json(indent=2))

    failed = len(keys) - len(ok)
    logger.info(f"🏁 Grid done: {len(ok)} cells ok, {failed} failed")
    if not ok:
        raise DataError("every grid cell failed", failed=failed)
    return GridReport(output_dir=out, results=ok, manifest=manifest)
