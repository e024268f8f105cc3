"""CSV ingestion, seeded splitting, standardization, and the synthetic 1-D generator."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

# Synthetic generator: x ~ U(-5, 5), y = 0.8 x + N(0, 1.2^2)
SYNTH_SLOPE = 0.8
SYNTH_FEATURE_LOW = -5.0
SYNTH_FEATURE_HIGH = 5.0
SYNTH_NOISE_STD = 1.2


@dataclass
class Dataset:
    """Feature matrix paired with a continuous label vector (float64)."""

    X: np.ndarray
    y: np.ndarray

    def __post_init__(self) -> None:
        self.X = np.ascontiguousarray(self.X, dtype=np.float64)
        self.y = np.ascontiguousarray(self.y, dtype=np.float64)
        if self.X.ndim != 2:
            raise ValueError("features must form a 2-D matrix")
        if self.y.ndim != 1 or self.y.shape[0] != self.X.shape[0]:
            raise ValueError("labels must be 1-D with one entry per feature row")
        if self.X.size and not np.isfinite(self.X).all():
            raise ValueError("features contain non-finite values")
        if self.y.size and not np.isfinite(self.y).all():
            raise ValueError("labels contain non-finite values")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def m(self) -> int:
        return self.X.shape[1]

    def copy(self) -> "Dataset":
        return Dataset(self.X.copy(), self.y.copy())

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.intp)
        return Dataset(self.X[idx], self.y[idx])

    def replaced(self, idx, X_new, y_new) -> "Dataset":
        """Copy with the rows at `idx` overwritten."""
        idx = np.asarray(idx, dtype=np.intp)
        out = self.copy()
        out.X[idx] = np.asarray(X_new, dtype=np.float64)
        out.y[idx] = np.asarray(y_new, dtype=np.float64)
        return out


@dataclass
class RawDataset(Dataset):
    """Dataset as loaded from disk, with column names for reporting."""

    column_names: list[str] = None

    def __post_init__(self) -> None:
        super().__post_init__()
        if self.n < 1 or self.m < 1:
            raise ValueError("raw dataset needs at least one row and one feature")
        if self.column_names is None:
            self.column_names = [f"col_{j}" for j in range(self.m)] + ["target"]
        if len(self.column_names) != self.m + 1:
            raise ValueError("need one column name per feature plus the target")


@dataclass
class SplitBundle:
    """Disjoint train/validation/test partitions of one raw dataset."""

    train: Dataset
    val: Dataset
    test: Dataset
    seed: int


@dataclass
class Scaler:
    """Per-column mean/std of the clean training partition (features and label)."""

    mean: np.ndarray  # length m+1, label last
    std: np.ndarray   # length m+1, strictly positive

    def __post_init__(self) -> None:
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.mean.shape != self.std.shape or self.mean.ndim != 1:
            raise ValueError("mean and std must be 1-D vectors of equal length")
        if np.any(self.std <= 0):
            raise ValueError("std entries must be positive")

    def transform(self, ds: Dataset) -> Dataset:
        X = (ds.X - self.mean[:-1]) / self.std[:-1]
        y = (ds.y - self.mean[-1]) / self.std[-1]
        return Dataset(X, y)

    def inverse_transform(self, ds: Dataset) -> Dataset:
        X = ds.X * self.std[:-1] + self.mean[:-1]
        y = ds.y * self.std[-1] + self.mean[-1]
        return Dataset(X, y)


def load_csv(path, has_header: bool = True, target_col=None) -> RawDataset:
    """Load a numeric CSV; the last column (or `target_col`) becomes the label.

    `target_col` may be a 0-based column index or, with a header, a column name.
    Every data cell must parse as a finite real; parse failures report the
    1-based data row and column.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")

    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        rows = [row for row in reader if row]

    names = None
    if has_header:
        if not rows:
            raise ValueError("empty file")
        names = [cell.strip() for cell in rows[0]]
        rows = rows[1:]
    if not rows:
        raise ValueError("empty body")
    n_cols = len(rows[0])
    if n_cols < 2:
        raise ValueError("need at least two columns (features plus target)")
    if names is None:
        names = [f"col_{j}" for j in range(n_cols)]
    elif len(names) != n_cols:
        raise ValueError("header width does not match data width")

    data = np.empty((len(rows), n_cols), dtype=np.float64)
    for i, row in enumerate(rows):
        if len(row) != n_cols:
            raise ValueError(f"row {i + 1} has {len(row)} cells, expected {n_cols}")
        for j, cell in enumerate(row):
            try:
                value = float(cell)
            except ValueError:
                raise ValueError(
                    f"non-numeric cell at row {i + 1}, column {j + 1}: {cell!r}"
                ) from None
            if not np.isfinite(value):
                raise ValueError(f"non-finite cell at row {i + 1}, column {j + 1}")
            data[i, j] = value

    if target_col is None:
        t = n_cols - 1
    elif isinstance(target_col, str):
        if target_col not in names:
            raise ValueError(f"unknown target column {target_col!r}")
        t = names.index(target_col)
    else:
        t = int(target_col)
        if not -n_cols <= t < n_cols:
            raise ValueError(f"target column index {target_col} out of range")
        t %= n_cols

    feat_cols = [j for j in range(n_cols) if j != t]
    column_names = [names[j] for j in feat_cols] + [names[t]]
    return RawDataset(data[:, feat_cols], data[:, t], column_names=column_names)


def write_csv(ds: Dataset, path, column_names: Sequence[str] | None = None,
              is_poison: np.ndarray | None = None) -> None:
    """Write a dataset as CSV (label last, optional boolean is_poison column)."""
    if column_names is None:
        column_names = [f"col_{j}" for j in range(ds.m)] + ["target"]
    header = list(column_names)
    if is_poison is not None:
        header.append("is_poison")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(ds.n):
            row = [repr(float(v)) for v in ds.X[i]] + [repr(float(ds.y[i]))]
            if is_poison is not None:
                row.append(str(int(is_poison[i])))
            writer.writerow(row)


def split(raw: Dataset, ratios: Sequence[float], seed: int) -> SplitBundle:
    """Randomly partition rows into train/val/test by the given fractions.

    Deterministic for a fixed seed; the permutation is uniform over rows.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3:
        raise ValueError("need exactly three ratios (train, val, test)")
    if any(r <= 0 for r in ratios):
        raise ValueError("empty partition disallowed: all ratios must be positive")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {sum(ratios)}")
    n = raw.n
    if n < 3:
        raise ValueError("need at least three rows to split")

    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    n_test = n - n_train - n_val
    if min(n_train, n_val, n_test) < 1:
        raise ValueError("empty partition disallowed: adjust ratios or add rows")

    perm = np.random.default_rng(seed).permutation(n)
    i_train = perm[:n_train]
    i_val = perm[n_train:n_train + n_val]
    i_test = perm[n_train + n_val:]
    return SplitBundle(raw.subset(i_train), raw.subset(i_val), raw.subset(i_test),
                       seed=seed)


def standardize(bundle: SplitBundle) -> tuple[SplitBundle, Scaler]:
    """Center/scale all partitions using the training partition's statistics.

    Features and label are both standardized (population std). Zero-variance
    columns are centered only, with their scale left at 1.
    """
    train = bundle.train
    if train.n < 1:
        raise ValueError("training partition is empty")
    cols = np.column_stack([train.X, train.y])
    mean = cols.mean(axis=0)
    std = cols.std(axis=0)
    std = np.where(std > 1e-12, std, 1.0)
    scaler = Scaler(mean, std)
    out = SplitBundle(scaler.transform(bundle.train), scaler.transform(bundle.val),
                      scaler.transform(bundle.test), seed=bundle.seed)
    return out, scaler


def gen_synthetic(n: int, seed: int) -> Dataset:
    """Generate the 1-D benchmark: x ~ U(-5, 5), y = 0.8 x + N(0, 1.2^2)."""
    if n < 0:
        raise ValueError("n must be non-negative")
    rng = np.random.default_rng(seed)
    x = rng.uniform(SYNTH_FEATURE_LOW, SYNTH_FEATURE_HIGH, size=n)
    noise = rng.normal(0.0, SYNTH_NOISE_STD, size=n)
    y = SYNTH_SLOPE * x + noise
    return Dataset(x.reshape(-1, 1), y)
