"""Dataset loading, feature normalization and seeded train/deployment splits.

Splits use numpy's PCG64 generator (``np.random.default_rng(seed)``); a
given (dataset, fraction, seed) always yields the same partition within this
package.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datamodel import Dataset, DenseSchema, SparseSchema, SplitPair


class DataFormatError(ValueError):
    """Input file does not match the expected format."""


def load_movielens(path) -> Dataset:
    """Read a MovieLens ``u.data`` file (user, item, rating, timestamp; tab separated)."""
    path = Path(path)
    users, items, ratings = [], [], []
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            fields = line.rstrip("\r\n").split("\t")
            if len(fields) != 4:
                raise DataFormatError(f"{path}:{lineno}: expected 4 tab-separated fields, "
                                      f"got {len(fields)}")
            try:
                user, item, rating, _ = (int(f) for f in fields)
            except ValueError:
                raise DataFormatError(f"{path}:{lineno}: non-integer field in {line.strip()!r}") from None
            if user < 1 or item < 1:
                raise DataFormatError(f"{path}:{lineno}: ids are 1-based")
            users.append(user)
            items.append(item)
            ratings.append(rating)
    if not users:
        raise DataFormatError(f"{path}: empty file")
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    schema = SparseSchema(num_users=int(users.max()), num_items=int(items.max()))
    pairs = np.stack([users - 1, items - 1], axis=1)
    return Dataset.from_arrays(users, pairs, np.asarray(ratings, dtype=np.float64), schema)


def load_csv(path, label_column: str, task: str = "regression") -> Dataset:
    """Read one-row-per-individual CSV data; every non-label column is a feature.

    ``task`` is ``"regression"`` or ``"classification"``; the latter requires
    labels in {0, 1}. Individual ids are the 0-based row ordinals.
    """
    if task not in ("regression", "classification"):
        raise ValueError(f"unknown task {task!r}")
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        seen = set()
        for col, name in enumerate(header):
            if name in seen:
                raise DataFormatError(f"{path}: duplicate header {name!r} in column {col + 1}")
            seen.add(name)
        if label_column not in header:
            raise DataFormatError(f"{path}: missing label column {label_column!r}")
        label_at = header.index(label_column)
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataFormatError(f"{path}:{lineno}: expected {len(header)} cells, got {len(row)}")
            values = []
            for col, cell in enumerate(row):
                try:
                    v = float(cell)
                except ValueError:
                    raise DataFormatError(f"{path}:{lineno}: non-numeric cell {cell!r} "
                                          f"in column {header[col]!r}") from None
                if not math.isfinite(v):
                    raise DataFormatError(f"{path}:{lineno}: non-finite cell in column {header[col]!r}")
                values.append(v)
            rows.append(values)
    if not rows:
        raise DataFormatError(f"{path}: no data rows")
    table = np.asarray(rows, dtype=np.float64)
    labels = table[:, label_at]
    features = np.delete(table, label_at, axis=1)
    if task == "classification" and not np.all(np.isin(labels, (0.0, 1.0))):
        raise DataFormatError(f"{path}: classification labels must be 0 or 1")
    return Dataset.from_arrays(np.arange(len(table)), features, labels,
                               DenseSchema(features.shape[1]))


@dataclass(frozen=True)
class NormalizationStats:
    mean: np.ndarray
    std: np.ndarray


def normalize_features(train: Dataset, deploy: Dataset):
    """Standardize dense features with training-set mean and (population) std.

    Constant training columns map to 0 on both sides.
    """
    if train.is_sparse or deploy.is_sparse:
        raise ValueError("normalization applies to dense features only")
    if len(train) == 0:
        raise ValueError("training set is empty")
    mean = train.dense.mean(axis=0)
    std = train.dense.std(axis=0)
    constant = std == 0
    safe = np.where(constant, 1.0, std)

    def transform(x):
        z = (x - mean) / safe
        z[:, constant] = 0.0
        return z

    stats = NormalizationStats(mean=mean, std=std)
    return train.with_features(transform(train.dense)), deploy.with_features(transform(deploy.dense)), stats


def random_split(d: Dataset, train_fraction: float, seed: int) -> SplitPair:
    """Per-example random partition; train receives ``floor(train_fraction * n)`` examples."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie strictly between 0 and 1")
    n = len(d)
    n_train = int(math.floor(train_fraction * n))
    if n_train == 0 or n_train == n:
        raise ValueError(f"train_fraction {train_fraction} leaves an empty side for {n} examples")
    perm = np.random.default_rng(seed).permutation(n)
    train_pos = np.sort(perm[:n_train])
    deploy_pos = np.sort(perm[n_train:])
    return SplitPair(d.subset(train_pos), d.subset(deploy_pos), seed, train_fraction)
