"""ROC-AUC, the Wilcoxon signed-rank test and grid aggregation."""

import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import stats

from app.errors import MetricError, StatisticalTestError

logger = logging.getLogger(__name__)

EXACT_WILCOXON_MAX_N = 25
SIGNIFICANCE = 0.05


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mann-Whitney AUC with midranks: (wins + ties/2) / (P * N)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise MetricError(f"{scores.shape} scores for {labels.shape} labels")
    if not np.isfinite(scores).all():
        raise MetricError("scores must be finite")
    if not np.isin(labels, (0, 1)).all():
        raise MetricError("labels must be binary (0/1)")
    positives = int((labels == 1).sum())
    negatives = labels.size - positives
    if positives == 0 or negatives == 0:
        raise MetricError("AUC needs both classes present")
    ranks = stats.rankdata(scores)
    u = ranks[labels == 1].sum() - positives * (positives + 1) / 2.0
    return float(u / (positives * negatives))


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float
    p_value: float
    n: int
    exact: bool

    @property
    def significant(self) -> bool:
        return self.p_value < SIGNIFICANCE


def _exact_counts(doubled_ranks: np.ndarray) -> np.ndarray:
    """counts[s] = number of sign patterns whose doubled positive-rank sum is s."""
    total = int(doubled_ranks.sum())
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in doubled_ranks:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts = counts + shifted
    return counts


def wilcoxon_signed_rank(a: Sequence[float], b: Sequence[float]) -> WilcoxonResult:
    """Two-sided paired test; the statistic is the positive-rank sum W+.

    Zero differences are dropped and ties get midranks. The null distribution is
    enumerated exactly up to 25 pairs; beyond that a tie-corrected normal
    approximation is used.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise StatisticalTestError(f"paired samples differ in shape: {a.shape} vs {b.shape}")
    diff = a - b
    diff = diff[diff != 0]
    n = diff.size
    if n == 0:
        raise StatisticalTestError("all paired differences are zero")

    ranks = stats.rankdata(np.abs(diff))
    w_plus = float(ranks[diff > 0].sum())

    if n <= EXACT_WILCOXON_MAX_N:
        doubled = np.rint(2 * ranks).astype(np.intp)
        counts = _exact_counts(doubled)
        observed = int(round(2 * w_plus))
        patterns = 2.0**n
        lower = counts[: observed + 1].sum() / patterns
        upper = counts[observed:].sum() / patterns
        p = min(1.0, 2.0 * min(lower, upper))
        return WilcoxonResult(statistic=w_plus, p_value=p, n=n, exact=True)

    mean = n * (n + 1) / 4.0
    _, tie_sizes = np.unique(ranks, return_counts=True)
    variance = n * (n + 1) * (2 * n + 1) / 24.0 - (tie_sizes**3 - tie_sizes).sum() / 48.0
    z = (w_plus - mean) / math.sqrt(variance)
    p = float(min(1.0, 2.0 * stats.norm.sf(abs(z))))
    return WilcoxonResult(statistic=w_plus, p_value=p, n=n, exact=False)


# Grid aggregation


@dataclass
class ScoredFold:
    method: str
    train_missing: float
    test_missing: float
    fold: int
    scores: np.ndarray
    labels: np.ndarray
    auc: float = field(init=False)

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.intp)
        self.auc = auc(self.scores, self.labels)

    @property
    def cell(self) -> Tuple[str, float, float]:
        return self.method, self.train_missing, self.test_missing


@dataclass(frozen=True)
class GridCell:
    method: str
    train_missing: float
    test_missing: float
    mean_auc: float
    stderr_auc: float
    n_folds: int


def _cell(method: str, train: float, test: float, aucs: Sequence[float]) -> GridCell:
    aucs = np.asarray(aucs, dtype=np.float64)
    stderr = float(aucs.std(ddof=1) / math.sqrt(aucs.size)) if aucs.size > 1 else math.nan
    if aucs.size < 2:
        logger.warning(f"⚠️ Cell {method} {train:.0%}/{test:.0%} has a single fold; standard error undefined")
    return GridCell(method, train, test, float(aucs.mean()), stderr, int(aucs.size))


def aggregate_grid(results: Iterable[ScoredFold]) -> List[GridCell]:
    """One cell per (method, train%, test%) with mean AUC and standard error over folds."""
    grouped: Dict[Tuple[str, float, float], List[float]] = defaultdict(list)
    for result in results:
        grouped[result.cell].append(result.auc)
    return [_cell(*key, aucs) for key, aucs in sorted(grouped.items())]


def average_methods(cells: Sequence[GridCell], methods: Sequence[str], name: str) -> List[GridCell]:
    """Per (train%, test%) average of several methods' mean AUC, when all are present."""
    by_key: Dict[Tuple[float, float], Dict[str, GridCell]] = defaultdict(dict)
    for cell in cells:
        if cell.method in methods:
            by_key[(cell.train_missing, cell.test_missing)][cell.method] = cell
    merged = []
    for (train, test), found in sorted(by_key.items()):
        if len(found) != len(methods):
            continue
        means = [found[m].mean_auc for m in methods]
        errors = [found[m].stderr_auc for m in methods]
        merged.append(
            GridCell(name, train, test, float(np.mean(means)), float(np.mean(errors)), min(c.n_folds for c in found.values()))
        )
    return merged


def cells_frame(cells: Sequence[GridCell]) -> pd.DataFrame:
    return pd.DataFrame(
        [
            {
                "method": c.method,
                "train_missing": c.train_missing,
                "test_missing": c.test_missing,
                "n_folds": c.n_folds,
                "mean_auc": c.mean_auc,
                "stderr_auc": c.stderr_auc,
            }
            for c in cells
        ],
        columns=["method", "train_missing", "test_missing", "n_folds", "mean_auc", "stderr_auc"],
    )


def format_grid(cells: Sequence[GridCell]) -> str:
    """Plain-text table: one block per train percentage, test percentages as columns.

    Entries read ``mean (stderr)`` in AUC percentage points.
    """
    if not cells:
        return "(no results)\n"
    methods = sorted({c.method for c in cells})
    tests = sorted({c.test_missing for c in cells})
    lookup = {(c.method, c.train_missing, c.test_missing): c for c in cells}
    width = max(len(m) for m in methods) + 2
    lines: List[str] = []
    for train in sorted({c.train_missing for c in cells}):
        lines.append(f"Train missing percentage: {train * 100:g}%")
        lines.append("".ljust(width) + "".join(f"{t * 100:g}%".rjust(16) for t in tests))
        for method in methods:
            row = method.ljust(width)
            for test in tests:
                cell = lookup.get((method, train, test))
                if cell is None:
                    row += "-".rjust(16)
                else:
                    err = "n/a" if math.isnan(cell.stderr_auc) else f"{cell.stderr_auc * 100:.2f}"
                    row += f"{cell.mean_auc * 100:.2f} ({err})".rjust(16)
            lines.append(row)
        lines.append("")
    return "\n".join(lines)


# Summaries


@dataclass(frozen=True)
class RobustnessSummary:
    method: str
    baseline_auc: float
    test_axis_drop: Optional[float]
    train_axis_drop: Optional[float]


def robustness(cells: Sequence[GridCell]) -> List[RobustnessSummary]:
    """Average relative AUC drop (percent) from the 0%/0% cell along each grid axis."""
    summaries = []
    for method in sorted({c.method for c in cells}):
        own = {(c.train_missing, c.test_missing): c.mean_auc for c in cells if c.method == method}
        baseline = own.get((0.0, 0.0))
        if baseline is None or baseline == 0:
            continue

        def drop(keys):
            values = [(baseline - own[k]) / baseline * 100.0 for k in keys]
            return float(np.mean(values)) if values else None

        summaries.append(
            RobustnessSummary(
                method=method,
                baseline_auc=baseline,
                test_axis_drop=drop([k for k in own if k[0] == 0.0 and k[1] > 0]),
                train_axis_drop=drop([k for k in own if k[0] > 0 and k[1] == 0.0]),
            )
        )
    return summaries


@dataclass(frozen=True)
class Comparison:
    reference: str
    competitor: str
    cells: int
    win_rate: float
    loss_rate: float


def compare_methods(results: Sequence[ScoredFold], reference: str) -> List[Comparison]:
    """Per grid cell, a Wilcoxon test on paired fold AUCs of ``reference`` vs each other
    method; reports the percentage of cells where the reference is significantly
    better (win) or worse (loss)."""
    per_cell: Dict[Tuple[str, float, float], Dict[int, float]] = defaultdict(dict)
    for r in results:
        per_cell[r.cell][r.fold] = r.auc

    comparisons = []
    for competitor in sorted({r.method for r in results} - {reference}):
        wins = losses = tested = 0
        for (method, train, test), folds in sorted(per_cell.items()):
            if method != competitor:
                continue
            ours = per_cell.get((reference, train, test))
            if not ours:
                continue
            shared = sorted(set(ours) & set(folds))
            if not shared:
                continue
            tested += 1
            a = [ours[f] for f in shared]
            b = [folds[f] for f in shared]
            try:
                result = wilcoxon_signed_rank(a, b)
            except StatisticalTestError:
                continue
            if result.significant:
                if np.mean(a) > np.mean(b):
                    wins += 1
                else:
                    losses += 1
        if tested:
            comparisons.append(
                Comparison(reference, competitor, tested, 100.0 * wins / tested, 100.0 * losses / tested)
            )
    return comparisons
