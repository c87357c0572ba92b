"""Synthetic datasets, CSV ingestion and training-set corruption protocols.

Every corruption returns a new ``Dataset`` and leaves its input untouched.
Counts are exact (floor/ceil of ratio times size), not per-row coin flips, so
a given seed always corrupts the same rows.
"""

from __future__ import annotations

from dataclasses import dataclass
import math
from pathlib import Path

import numpy as np

from .tensor import DTYPE, RngStream, floor_count, kept_count


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    targets: np.ndarray
    split: str = "train"
    task: str = "classification"
    num_classes: int = 2

    def __post_init__(self):
        if self.features.ndim != 2 or len(self.features) == 0:
            raise DatasetError("features must be a non-empty [N, d] array")
        if len(self.targets) != len(self.features):
            raise DatasetError("features and targets disagree on N")
        if not np.all(np.isfinite(self.features)):
            raise DatasetError("feature rows must be finite")
        if self.split not in ("train", "dev"):
            raise DatasetError(f"unknown split {self.split!r}")
        if self.task == "classification":
            if np.any(self.targets < 0) or np.any(self.targets >= self.num_classes):
                raise DatasetError(f"class labels must lie in [0, {self.num_classes})")
        elif self.task != "regression":
            raise DatasetError(f"unknown task {self.task!r}")

    def __len__(self) -> int:
        return len(self.features)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def take(self, rows) -> "Dataset":
        rows = np.asarray(rows, dtype=np.int64)
        return Dataset(self.features[rows].copy(), self.targets[rows].copy(), self.split, self.task, self.num_classes)

    def with_targets(self, targets) -> "Dataset":
        return Dataset(self.features.copy(), np.asarray(targets), self.split, self.task, self.num_classes)

    def as_split(self, split: str) -> "Dataset":
        return Dataset(self.features.copy(), self.targets.copy(), split, self.task, self.num_classes)


def make_blobs(n: int, d: int, separation: float, rng: RngStream, split: str = "train") -> Dataset:
    """Two unit-variance Gaussian classes centred at -sep/2 and +sep/2 on axis 0."""
    if n < 2 or n % 2 or d < 1:
        raise DatasetError("make_blobs needs an even n >= 2 and d >= 1")
    if not separation > 0:
        raise DatasetError("separation must be positive")
    half = n // 2
    x = rng.normal((n, d))
    y = np.repeat(np.array([0, 1], dtype=np.int64), half)
    x[:, 0] += np.where(y == 1, separation / 2.0, -separation / 2.0)
    return Dataset(x, y, split)


def make_xor(n: int, noise_std: float, rng: RngStream, split: str = "train") -> Dataset:
    """Four Gaussian clusters at (+-1, +-1); label is 1 when the two signs differ."""
    if n < 4 or n % 4:
        raise DatasetError("make_xor needs n divisible by 4")
    if noise_std < 0:
        raise DatasetError("noise_std must be non-negative")
    corners = np.array([[-1.0, -1.0], [-1.0, 1.0], [1.0, -1.0], [1.0, 1.0]])
    labels = np.array([0, 1, 1, 0], dtype=np.int64)
    which = np.repeat(np.arange(4), n // 4)
    x = corners[which] + noise_std * rng.normal((n, 2))
    return Dataset(x.astype(DTYPE), labels[which], split)


def _require_train_classification(ds: Dataset, op: str) -> None:
    if ds.task != "classification":
        raise DatasetError(f"{op} needs a classification dataset")
    if ds.split != "train":
        raise DatasetError(f"{op} only corrupts the train split")


def inject_label_noise(ds: Dataset, ratio: float, rng: RngStream) -> Dataset:
    """Relabel exactly ``floor(ratio * N)`` distinct rows, each to a different class."""
    _require_train_classification(ds, "inject_label_noise")
    if not 0.0 <= ratio <= 1.0:
        raise DatasetError(f"noise ratio must lie in [0, 1], got {ratio}")
    count = floor_count(ratio, len(ds))
    targets = ds.targets.copy()
    if count:
        rows = rng.choice(len(ds), count)
        shift = rng.integers(1, ds.num_classes, size=count)
        targets[rows] = (targets[rows] + shift) % ds.num_classes
    return ds.with_targets(targets)


def make_imbalanced(ds: Dataset, minority_class: int, reduction: float, rng: RngStream) -> Dataset:
    """Drop minority-class rows so ``ceil((1 - reduction) * n_c)`` remain."""
    _require_train_classification(ds, "make_imbalanced")
    if not 0.0 <= reduction < 1.0:
        raise DatasetError(f"reduction ratio must lie in [0, 1), got {reduction}")
    members = np.flatnonzero(ds.targets == minority_class)
    if members.size == 0:
        raise DatasetError(f"class {minority_class} is absent from the dataset")
    keep = kept_count(reduction, members.size)
    kept_members = rng.choice(members.size, keep)
    drop = np.zeros(len(ds), dtype=bool)
    drop[members] = True
    drop[members[kept_members]] = False
    return ds.take(np.flatnonzero(~drop))


def subsample(ds: Dataset, size: int, rng: RngStream) -> Dataset:
    if not 1 <= size <= len(ds):
        raise DatasetError(f"cannot draw {size} rows from a dataset of {len(ds)}")
    return ds.take(rng.choice(len(ds), size))


def load_csv(path, task: str = "classification", num_classes: int | None = None, split: str = "train") -> Dataset:
    """Read ``label,f1,...,fd`` rows; an optional first line starting ``label,`` is a header.

    Class count defaults to ``max(label) + 1``.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DatasetError(f"{path}: {exc.strerror or exc}") from exc
    labels = []
    rows = []
    width = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if lineno == 1 and line.lower().startswith("label,"):
            continue
        fields = [f.strip().replace("\u2212", "-") for f in line.split(",")]
        if len(fields) < 2:
            raise DatasetError(f"{path}:{lineno}: expected a label and at least one feature")
        try:
            values = [float(f) for f in fields]
        except ValueError:
            raise DatasetError(f"{path}:{lineno}: non-numeric field in {line!r}") from None
        if width is None:
            width = len(values) - 1
        elif len(values) - 1 != width:
            raise DatasetError(f"{path}:{lineno}: expected {width} features, found {len(values) - 1}")
        labels.append(values[0])
        rows.append(values[1:])
    if not rows:
        raise DatasetError(f"{path}: no data rows")
    x = np.asarray(rows, dtype=DTYPE)
    if task == "classification":
        y = np.asarray(labels)
        if np.any(y != np.round(y)) or np.any(y < 0):
            raise DatasetError(f"{path}: class labels must be non-negative integers")
        y = y.astype(np.int64)
        classes = num_classes if num_classes is not None else max(2, int(y.max()) + 1)
        return Dataset(x, y, split, task, classes)
    return Dataset(x, np.asarray(labels, dtype=DTYPE), split, "regression", 1)


def label_counts(ds: Dataset) -> dict[int, int]:
    values, counts = np.unique(ds.targets, return_counts=True)
    return {int(v): int(c) for v, c in zip(values, counts)}


def batches(n: int, batch_size: int, order: np.ndarray):
    """Yield index arrays of ``order`` in consecutive chunks of ``batch_size``."""
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def num_batches(n: int, batch_size: int) -> int:
    return math.ceil(n / batch_size)
