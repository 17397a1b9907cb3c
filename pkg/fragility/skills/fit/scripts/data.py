"""Dataset ingestion, standardization, splitting and synthetic generation.

Every function here is pure: inputs are never mutated and the returned
arrays are fresh copies, so datasets can be shared between threads.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.special import expit

logger = logging.getLogger(__name__)


class DatasetError(ValueError):
    """Raised when a dataset or a data-preparation request is invalid."""


# ------------------------------------------------------------------
# Types
# ------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Dataset:
    """Design matrix ``X`` (n x d), targets ``y`` (n,) and feature labels."""

    X: np.ndarray
    y: np.ndarray
    feature_names: tuple[str, ...]
    provenance: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        y = np.asarray(self.y, dtype=float).reshape(-1)
        if X.ndim != 2:
            raise DatasetError(f"X must be a 2-D matrix, got shape {X.shape}")
        if X.shape[0] != y.shape[0]:
            raise DatasetError(
                f"Row count of X ({X.shape[0]}) does not match length of y ({y.shape[0]})"
            )
        if X.shape[0] < 2:
            raise DatasetError(f"Dataset needs at least 2 rows, got {X.shape[0]}")
        if X.shape[1] < 1:
            raise DatasetError("Dataset needs at least 1 feature")
        if len(self.feature_names) != X.shape[1]:
            raise DatasetError(
                f"{len(self.feature_names)} feature names given for {X.shape[1]} columns"
            )
        if not np.all(np.isfinite(X)) or not np.all(np.isfinite(y)):
            raise DatasetError("Dataset contains non-finite entries (NaN or inf)")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "feature_names", tuple(self.feature_names))

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def subset(self, indices) -> "Dataset":
        """Return the rows at *indices* (order preserved) as a new Dataset."""
        idx = np.asarray(indices, dtype=int)
        return Dataset(self.X[idx].copy(), self.y[idx].copy(), self.feature_names,
                       dict(self.provenance))


@dataclass(frozen=True, eq=False)
class StandardizationState:
    """Per-feature mean and population standard deviation."""

    mean: np.ndarray
    scale: np.ndarray

    def transform(self, X: np.ndarray) -> np.ndarray:
        return (np.asarray(X, dtype=float) - self.mean) / self.scale

    def inverse_transform(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(X, dtype=float) * self.scale + self.mean


@dataclass(frozen=True, eq=False)
class FoldSplit:
    """Balanced assignment of test indices to folds."""

    assignments: np.ndarray
    folds: int

    def indices(self, fold: int) -> np.ndarray:
        """Test indices in *fold*, ascending."""
        return np.flatnonzero(self.assignments == fold)

    def sizes(self) -> list[int]:
        return [int(np.sum(self.assignments == f)) for f in range(self.folds)]


@dataclass(frozen=True, eq=False)
class RecourseTargeting:
    """Target score ``s`` and the mask of points scoring strictly below it."""

    s: float
    needs_recourse: np.ndarray


# ------------------------------------------------------------------
# Loading
# ------------------------------------------------------------------


def load_csv(path: Path, target_column: str) -> Dataset:
    """Load a numeric CSV file with a header row.

    ``y`` is taken from *target_column*; every other column becomes a feature
    in header order.  Exact duplicate rows are dropped (first occurrence kept)
    before anything else happens.

    Raises
    ------
    FileNotFoundError
        If *path* does not exist.
    DatasetError
        For an empty file, a missing target column, a non-numeric or non-finite cell
        (reported with its 1-based data row and column name), or fewer than
        2 rows after deduplication.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"CSV file not found: {path}")

    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except pd.errors.EmptyDataError as exc:
        raise DatasetError(f"CSV file is empty: {path}") from exc
    if target_column not in frame.columns:
        raise DatasetError(
            f"Target column '{target_column}' not found; columns are {list(frame.columns)}"
        )

    numeric = {}
    for column in frame.columns:
        raw = frame[column].str.strip()
        values = pd.to_numeric(raw, errors="coerce")
        bad = values.isna() | ~np.isfinite(values.to_numpy(dtype=float, na_value=np.nan))
        if bad.any():
            row = int(np.flatnonzero(bad.to_numpy())[0])
            raise DatasetError(
                f"Non-numeric cell '{frame[column].iloc[row]}' at row {row + 1}, "
                f"column '{column}'"
            )
        numeric[column] = values.astype(float)

    table = pd.DataFrame(numeric, columns=frame.columns)
    before = len(table)
    table = table.drop_duplicates(keep="first").reset_index(drop=True)
    if len(table) < before:
        logger.info("Dropped %d duplicate rows from %s", before - len(table), path)
    if len(table) < 2:
        raise DatasetError(f"Need at least 2 rows after deduplication, got {len(table)}")

    feature_names = [c for c in table.columns if c != target_column]
    return Dataset(
        table[feature_names].to_numpy(dtype=float),
        table[target_column].to_numpy(dtype=float),
        tuple(feature_names),
        {"source": "csv", "path": str(path), "duplicates_dropped": before - len(table)},
    )


# ------------------------------------------------------------------
# Standardization and splitting
# ------------------------------------------------------------------


def standardize(ds: Dataset) -> tuple[Dataset, StandardizationState]:
    """Center every feature and scale it to unit population standard deviation.

    ``y`` is left unchanged.  Constant features are rejected by name.
    """
    mean = ds.X.mean(axis=0)
    scale = ds.X.std(axis=0)
    for j, (m, sd) in enumerate(zip(mean, scale)):
        if sd <= np.finfo(float).eps * max(1.0, abs(m)):
            raise DatasetError(f"Feature '{ds.feature_names[j]}' is constant")
    state = StandardizationState(mean, scale)
    out = Dataset(state.transform(ds.X), ds.y.copy(), ds.feature_names,
                  {**ds.provenance, "standardized": True})
    return out, state


def train_test_split(ds: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Shuffle rows with *seed* and split off ``round(test_fraction * n)`` test rows."""
    if not 0.0 < test_fraction < 1.0:
        raise DatasetError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    n_test = int(round(test_fraction * ds.n))
    if n_test < 1 or ds.n - n_test < 2:
        raise DatasetError(
            f"Split of {ds.n} rows with test_fraction={test_fraction} leaves an empty side"
        )
    perm = np.random.default_rng(seed).permutation(ds.n)
    test_idx = np.sort(perm[:n_test])
    train_idx = np.sort(perm[n_test:])
    return ds.subset(train_idx), ds.subset(test_idx)


def make_folds(n_test: int, folds: int, seed: int) -> FoldSplit:
    """Assign ``n_test`` indices to *folds* balanced folds (sizes differ by <= 1)."""
    if folds < 1:
        raise DatasetError(f"folds must be >= 1, got {folds}")
    if folds > n_test:
        raise DatasetError(f"Cannot split {n_test} test points into {folds} folds")
    perm = np.random.default_rng(seed).permutation(n_test)
    assignments = np.empty(n_test, dtype=int)
    assignments[perm] = np.arange(n_test) % folds
    return FoldSplit(assignments, folds)


def median_target(scores) -> RecourseTargeting:
    """Lower median of *scores* as the target; flag points strictly below it."""
    scores = np.asarray(scores, dtype=float).reshape(-1)
    if scores.size == 0:
        raise DatasetError("Cannot take the median of an empty score vector")
    s = float(np.sort(scores)[(scores.size - 1) // 2])
    return RecourseTargeting(s, scores < s)


# ------------------------------------------------------------------
# Synthetic data
# ------------------------------------------------------------------


def _planted_count(n: int, outlier_fraction: float) -> int:
    return int(np.floor(outlier_fraction * n + 0.5))


def synth_regression(
    n: int,
    d: int,
    noise_sd: float,
    outlier_fraction: float,
    seed: int,
) -> Dataset:
    """Gaussian regression data with planted high-leverage outliers.

    ``y = X beta + noise`` for a planted ``beta``.  A fraction of rows has its
    features scaled by 5 and its target sign flipped, so influential deletions
    exist by construction.  The planted coefficients and outlier indices are
    recorded in ``provenance``.
    """
    if n < 4:
        raise DatasetError(f"n must be >= 4, got {n}")
    if d < 1:
        raise DatasetError(f"d must be >= 1, got {d}")
    if noise_sd < 0:
        raise DatasetError(f"noise_sd must be >= 0, got {noise_sd}")
    if not 0.0 <= outlier_fraction < 0.5:
        raise DatasetError(f"outlier_fraction must lie in [0, 0.5), got {outlier_fraction}")

    rng = np.random.default_rng(seed)
    coef = rng.normal(size=d)
    X = rng.normal(size=(n, d))
    outliers = np.sort(rng.choice(n, size=_planted_count(n, outlier_fraction), replace=False))
    X[outliers] *= 5.0
    y = X @ coef + noise_sd * rng.normal(size=n)
    y[outliers] = -y[outliers]

    return Dataset(
        X, y, tuple(f"x{j}" for j in range(d)),
        {
            "source": "synth_regression",
            "seed": seed,
            "coef": coef.tolist(),
            "outliers": outliers.tolist(),
        },
    )


def synth_classification(
    n: int,
    d: int,
    seed: int,
    outlier_fraction: float = 0.0,
    signal: float = 1.5,
) -> Dataset:
    """Logistic labels ``y ~ Bernoulli(sigmoid(X beta))`` with optional flipped outliers.

    Outliers get the same x5 leverage as in :func:`synth_regression` and their
    label is flipped.
    """
    if n < 4:
        raise DatasetError(f"n must be >= 4, got {n}")
    if d < 1:
        raise DatasetError(f"d must be >= 1, got {d}")
    if not 0.0 <= outlier_fraction < 0.5:
        raise DatasetError(f"outlier_fraction must lie in [0, 0.5), got {outlier_fraction}")

    rng = np.random.default_rng(seed)
    coef = signal * rng.normal(size=d) / np.sqrt(d)
    X = rng.normal(size=(n, d))
    prob = expit(X @ coef)
    y = (rng.uniform(size=n) < prob).astype(float)
    outliers = np.sort(rng.choice(n, size=_planted_count(n, outlier_fraction), replace=False))
    X[outliers] *= 5.0
    y[outliers] = 1.0 - y[outliers]
    if np.unique(y).size < 2:
        raise DatasetError("Generated labels contain a single class; try another seed")

    return Dataset(
        X, y, tuple(f"x{j}" for j in range(d)),
        {
            "source": "synth_classification",
            "seed": seed,
            "coef": coef.tolist(),
            "outliers": outliers.tolist(),
        },
    )
