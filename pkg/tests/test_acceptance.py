"""Desk-scale reproductions on the UCI Spambase and Seismic-Bumps datasets.

Place ``spambase.csv`` / ``spambase.schema.json`` and ``seismic-bumps.csv`` /
``seismic-bumps.schema.json`` in the directory named by ``NAIM_DATA_DIR``. The tests
are skipped otherwise.
"""

import os
from pathlib import Path

import pytest

from app.services.experiments import ExperimentConfig, MethodEnum, run_grid

pytestmark = [pytest.mark.slow, pytest.mark.integration, pytest.mark.experiments]

DATA_DIR = Path(os.environ["NAIM_DATA_DIR"]) if os.getenv("NAIM_DATA_DIR") else None


def dataset(name):
    if DATA_DIR is None:
        pytest.skip("NAIM_DATA_DIR not set")
    csv_path, schema_path = DATA_DIR / f"{name}.csv", DATA_DIR / f"{name}.schema.json"
    if not (csv_path.exists() and schema_path.exists()):
        pytest.skip(f"{name} files not found in {DATA_DIR}")
    return str(csv_path), str(schema_path)


def mean_auc(report, method, train, test):
    aucs = [r.auc for r in report.results if (r.method, r.train_missing, r.test_missing) == (method, train, test)]
    return sum(aucs) / len(aucs)


@pytest.fixture(scope="module")
def spambase_report(tmp_path_factory):
    csv_path, schema_path = dataset("spambase")
    config = ExperimentConfig(
        dataset_path=csv_path,
        schema_path=schema_path,
        train={"max_epochs": 300},
        methods=[MethodEnum.naim],
        train_missing=[0.0],
        test_missing=[0.0, 0.25, 0.75],
        output_dir=str(tmp_path_factory.mktemp("spambase")),
    )
    return run_grid(config, jobs=int(os.getenv("NAIM_JOBS", "1")))


class TestSpambase:
    def test_complete_data_auc(self, spambase_report):
        """0% / 0% missing reaches an AUC of at least 0.95."""
        assert mean_auc(spambase_report, "naim", 0.0, 0.0) >= 0.95

    def test_degrades_gracefully_with_test_missing(self, spambase_report):
        """AUC does not rise as test missingness grows and stays above 0.80 at 75%."""
        aucs = [mean_auc(spambase_report, "naim", 0.0, p) for p in (0.0, 0.25, 0.75)]
        assert aucs[0] >= aucs[1] >= aucs[2]
        assert aucs[2] >= 0.80
        assert abs(aucs[2] - 0.8886) <= 0.06

    def test_reports_written(self, spambase_report):
        for name in ("results.csv", "folds.csv", "grid.txt", "manifest.json"):
            assert (spambase_report.output_dir / name).exists()


class TestSeismicBumps:
    def test_masking_regularizer_helps(self, tmp_path):
        """With 50% test missing, training with random masking beats training without it."""
        csv_path, schema_path = dataset("seismic-bumps")
        config = ExperimentConfig(
            dataset_path=csv_path,
            schema_path=schema_path,
            train={"max_epochs": 300},
            methods=[MethodEnum.naim, MethodEnum.naim_no_reg, MethodEnum.naim_no_reg_mean],
            train_missing=[0.0],
            test_missing=[0.5, 0.75],
            output_dir=str(tmp_path),
        )
        report = run_grid(config, jobs=int(os.getenv("NAIM_JOBS", "1")))
        assert mean_auc(report, "naim", 0.0, 0.5) > mean_auc(report, "naim-no-reg", 0.0, 0.5)
        assert mean_auc(report, "naim-no-reg+mean", 0.0, 0.75) > mean_auc(report, "naim-no-reg", 0.0, 0.75)
