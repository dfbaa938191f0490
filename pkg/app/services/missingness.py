"""MCAR missingness injection and the per-epoch random masking regularizer."""

import logging
import math
from typing import Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from app.errors import InjectionError
from app.services.data import TabularDataset

logger = logging.getLogger(__name__)

REPAIR_ROUNDS = 10


class McarSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    p: float = Field(..., ge=0.0, lt=1.0, description="Target fraction of missing cells")
    seed: int = Field(0, ge=0, description="Seed of the injection stream")


class AugmentationPolicy(BaseModel):
    model_config = ConfigDict(frozen=True)

    probability: float = Field(0.5, ge=0.0, le=1.0, description="Chance a sample is masked in an epoch")


def _full_lines(present: np.ndarray, repairable: np.ndarray) -> Optional[Tuple[int, int]]:
    """First fully-missing row (axis 0) or column (axis 1) holding a repairable cell."""
    rows = np.flatnonzero(~present.any(axis=1) & repairable.any(axis=1))
    if rows.size:
        return 0, int(rows[0])
    cols = np.flatnonzero(~present.any(axis=0) & repairable.any(axis=0))
    if cols.size:
        return 1, int(cols[0])
    return None


def inject_mcar(d: TabularDataset, spec: McarSpec) -> TabularDataset:
    """Mask cells uniformly at random until round(j*n*p) cells are missing overall.

    Only the present grid changes. Rows or columns emptied by the injection get one
    masked cell restored and a replacement masked elsewhere, so the count is exact.
    """
    j, n = d.present.shape
    target = int(math.floor(j * n * spec.p + 0.5))
    new = max(0, target - d.missing_count)
    if new == 0 or j == 0:
        return d

    observed = np.flatnonzero(d.present.reshape(-1))
    if new > observed.size or j * n - max(target, d.missing_count) < max(j, n):
        raise InjectionError(
            f"cannot mask {target} of {j * n} cells without emptying a row or column", target=target
        )

    rng = np.random.default_rng(spec.seed)
    present = d.present.copy()
    flat = present.reshape(-1)
    flat[rng.choice(observed, size=new, replace=False)] = False
    injected = d.present & ~present

    for _ in range(REPAIR_ROUNDS * j * n):
        line = _full_lines(present, injected)
        if line is None:
            break
        axis, index = line
        cells = np.flatnonzero(injected[index] if axis == 0 else injected[:, index])
        pick = int(rng.choice(cells))
        row, col = (index, pick) if axis == 0 else (pick, index)
        present[row, col] = True
        injected[row, col] = False

        safe = present & (present.sum(axis=1, keepdims=True) > 1) & (present.sum(axis=0, keepdims=True) > 1)
        safe[row, col] = False
        candidates = np.flatnonzero(safe.reshape(-1))
        if candidates.size == 0:
            # every choice empties a line; take any and let the loop repair it
            fallback = present.copy()
            fallback[row, col] = False
            candidates = np.flatnonzero(fallback.reshape(-1))
        r, c = divmod(int(rng.choice(candidates)), n)
        present[r, c] = False
        injected[r, c] = True
    else:
        if _full_lines(present, injected) is not None:
            raise InjectionError("repair loop did not converge", target=target)

    logger.debug(f"MCAR p={spec.p}: masked {new} new cells ({target} missing of {j * n})")
    return d.with_present(present)


def augment_sample(
    values: np.ndarray, present: np.ndarray, policy: AugmentationPolicy, rng: np.random.Generator
) -> Tuple[np.ndarray, np.ndarray]:
    """With the policy's probability, hide c ~ U{1..v-1} of the v present features."""
    if rng.random() >= policy.probability:
        return values, present
    visible = np.flatnonzero(present)
    if visible.size <= 1:
        return values, present
    count = int(rng.integers(1, visible.size))
    masked = present.copy()
    masked[rng.choice(visible, size=count, replace=False)] = False
    return values, masked


def sample_stream(seed: int, epoch: int, sample_index: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, sample_index])


def augment_batch(
    values: np.ndarray,
    present: np.ndarray,
    sample_indices: Sequence[int],
    policy: AugmentationPolicy,
    seed: int,
    epoch: int,
) -> Tuple[np.ndarray, int, int]:
    """Augment each row with its own (seed, epoch, sample) stream.

    Returns the new present grid, the number of masked samples and of masked cells.
    """
    out = present.copy()
    for row, sample_index in enumerate(sample_indices):
        _, out[row] = augment_sample(values[row], present[row], policy, sample_stream(seed, epoch, int(sample_index)))
    changed = out != present
    return out, int(changed.any(axis=1).sum()), int(changed.sum())
