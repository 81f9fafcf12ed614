"""Datasets, Dirichlet client partitioning, the synthetic benchmark and the
class-conditional generator used for knowledge filling."""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Protocol

import numpy as np


class Origin(enum.IntEnum):
    REAL = 0
    SYNTHETIC = 1


@dataclass(frozen=True)
class Sample:
    features: np.ndarray
    label: int
    origin: Origin = Origin.REAL


class LabeledDataset:
    """Column-oriented sample collection. Row order is the sample order."""

    def __init__(
        self,
        features: np.ndarray,
        labels: np.ndarray,
        num_classes: int,
        origin: np.ndarray | None = None,
    ):
        features = np.array(features, dtype=float)
        labels = np.array(labels, dtype=np.int64)
        if features.ndim != 2:
            features = features.reshape(len(labels), -1)
        if features.shape[0] != labels.shape[0]:
            raise ValueError("features and labels disagree on sample count")
        if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
            raise ValueError(f"labels must lie in [0, {num_classes})")
        if not np.all(np.isfinite(features)):
            raise ValueError("non-finite features")
        if origin is None:
            origin = np.full(len(labels), Origin.REAL, dtype=np.int8)
        self.features = features
        self.labels = labels
        self.origin = np.array(origin, dtype=np.int8)
        self.num_classes = num_classes
        for arr in (self.features, self.labels, self.origin):
            arr.setflags(write=False)

    @classmethod
    def empty(cls, dim: int, num_classes: int) -> LabeledDataset:
        return cls(np.zeros((0, dim)), np.zeros(0, dtype=np.int64), num_classes)

    @classmethod
    def from_samples(cls, samples: list[Sample], num_classes: int, dim: int | None = None) -> LabeledDataset:
        if not samples:
            if dim is None:
                raise ValueError("dim is required for an empty sample list")
            return cls.empty(dim, num_classes)
        return cls(
            np.stack([s.features for s in samples]),
            np.array([s.label for s in samples]),
            num_classes,
            np.array([int(s.origin) for s in samples]),
        )

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.features[i], int(self.labels[i]), Origin(int(self.origin[i])))

    def __iter__(self) -> Iterator[Sample]:
        for i in range(len(self)):
            yield self[i]

    def subset(self, indices: np.ndarray) -> LabeledDataset:
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.features[idx], self.labels[idx], self.num_classes, self.origin[idx])

    @staticmethod
    def concat(parts: list[LabeledDataset]) -> LabeledDataset:
        if not parts:
            raise ValueError("nothing to concatenate")
        return LabeledDataset(
            np.concatenate([p.features for p in parts]),
            np.concatenate([p.labels for p in parts]),
            parts[0].num_classes,
            np.concatenate([p.origin for p in parts]),
        )

    def class_indices(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.labels == c)


def class_counts(dataset: LabeledDataset, num_classes: int | None = None) -> np.ndarray:
    c = dataset.num_classes if num_classes is None else num_classes
    return np.bincount(dataset.labels, minlength=c).astype(np.int64)


def largest_remainder(total: int, proportions: np.ndarray) -> np.ndarray:
    """Integer allocation of `total` proportional to `proportions`, summing exactly.

    Leftover units go to the largest fractional parts; ties go to the lower index.
    """
    p = np.asarray(proportions, dtype=float)
    p = p / p.sum()
    raw = total * p
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def dirichlet_partition(
    dataset: LabeledDataset,
    num_clients: int,
    alpha: float,
    rng: np.random.Generator,
) -> list[LabeledDataset]:
    """Split each class across clients with Dirichlet(alpha) proportions.

    Client datasets keep the source row order.
    """
    if num_clients < 1:
        raise ValueError("num_clients must be >= 1")
    if not alpha > 0:
        raise ValueError(f"alpha must be > 0, got {alpha}")
    owner = np.empty(len(dataset), dtype=np.int64)
    for c in range(dataset.num_classes):
        idx = dataset.class_indices(c)
        if idx.size == 0:
            raise ValueError(f"class {c} has no samples")
        p = rng.dirichlet(np.full(num_clients, alpha))
        # tiny alphas can underflow every component to zero
        if not np.isfinite(p).all() or p.sum() <= 0:
            p = np.zeros(num_clients)
            p[rng.integers(num_clients)] = 1.0
        counts = largest_remainder(idx.size, p)
        shuffled = rng.permutation(idx)
        owner[shuffled] = np.repeat(np.arange(num_clients), counts)
    return [dataset.subset(np.flatnonzero(owner == k)) for k in range(num_clients)]


def class_means(dataset: LabeledDataset) -> np.ndarray:
    return np.stack([dataset.features[dataset.labels == c].mean(axis=0) for c in range(dataset.num_classes)])


def mean_intra_class_std(dataset: LabeledDataset) -> float:
    stds = []
    for c in range(dataset.num_classes):
        x = dataset.features[dataset.labels == c]
        if len(x) >= 2:
            stds.append(x.std(axis=0, ddof=1))
    return float(np.mean(stds)) if stds else 1.0


def make_synthetic_benchmark(
    num_classes: int,
    n_per_class: int,
    dim: int,
    class_separation: float,
    rng: np.random.Generator,
    test_fraction: float = 0.2,
) -> tuple[LabeledDataset, LabeledDataset]:
    """Unit-variance Gaussian blobs, one per class.

    Means sit at the vertices of a regular simplex (scaled one-hot vectors
    projected to `dim` coordinates), so every pair is exactly
    `class_separation` apart. The per-class split puts `n_per_class` samples
    in train and `round(n_per_class * test_fraction / (1 - test_fraction))`
    in test, i.e. an 80/20 split at the default fraction.
    """
    if num_classes < 2 or dim < 2:
        raise ValueError("need at least 2 classes and 2 dimensions")
    # orthonormal frame in R^dim (dim may be smaller than num_classes)
    basis = np.eye(num_classes) - 1.0 / num_classes
    if dim >= num_classes:
        q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
        means = basis @ q[:num_classes]
    else:
        # the centred simplex spans num_classes-1 dims; fall back to points on a circle
        if dim < num_classes - 1:
            angles = 2 * np.pi * np.arange(num_classes) / num_classes
            circle = np.stack([np.cos(angles), np.sin(angles)], axis=1)
            means = np.zeros((num_classes, dim))
            means[:, :2] = circle
        else:
            u, s, vt = np.linalg.svd(basis)
            means = u[:, :dim] * s[:dim]
    pair = np.linalg.norm(means[0] - means[1])
    means = means * (class_separation / pair)

    n_test = int(round(n_per_class * test_fraction / (1.0 - test_fraction)))
    n_total = n_per_class + n_test
    feats = []
    labels = []
    for c in range(num_classes):
        feats.append(means[c] + rng.normal(size=(n_total, dim)))
        labels.append(np.full(n_total, c))
    x = np.concatenate(feats)
    y = np.concatenate(labels)
    is_train = np.zeros(len(y), dtype=bool)
    for c in range(num_classes):
        rows = np.flatnonzero(y == c)
        is_train[rng.permutation(rows)[:n_per_class]] = True
    train = LabeledDataset(x[is_train], y[is_train], num_classes)
    test = LabeledDataset(x[~is_train], y[~is_train], num_classes)
    return train, test


class ClassGenerator(Protocol):
    num_classes: int

    def generate(self, label: int, count: int, rng: np.random.Generator) -> LabeledDataset:
        """Exactly `count` synthetic samples of class `label`."""
        ...


@dataclass(frozen=True)
class GaussianClassGenerator:
    """Diagonal Gaussian per class, displaced by a fixed domain shift."""

    means: np.ndarray  # (C, d)
    variances: np.ndarray  # (C, d)
    shift: np.ndarray  # (d,)

    @property
    def num_classes(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def generate(self, label: int, count: int, rng: np.random.Generator) -> LabeledDataset:
        if not 0 <= label < self.num_classes:
            raise ValueError(f"label {label} outside [0, {self.num_classes})")
        if count < 0:
            raise ValueError("count must be nonnegative")
        noise = rng.normal(size=(count, self.dim))
        x = self.means[label] + self.shift + noise * np.sqrt(self.variances[label])
        return LabeledDataset(
            x,
            np.full(count, label),
            self.num_classes,
            np.full(count, Origin.SYNTHETIC, dtype=np.int8),
        )


def default_domain_shift(dataset: LabeledDataset, scale: float = 0.75) -> np.ndarray:
    return np.full(dataset.dim, scale * mean_intra_class_std(dataset))


def fit_gaussian_generator(dataset: LabeledDataset, shift: np.ndarray | None = None) -> GaussianClassGenerator:
    """Per-class sample mean and variance. Classes with fewer than 2 samples get unit variance."""
    c, d = dataset.num_classes, dataset.dim
    means = np.zeros((c, d))
    variances = np.ones((c, d))
    for k in range(c):
        x = dataset.features[dataset.labels == k]
        if len(x) == 0:
            raise ValueError(f"class {k} absent from the fitting data")
        means[k] = x.mean(axis=0)
        if len(x) >= 2:
            variances[k] = x.var(axis=0, ddof=1)
    if shift is None:
        shift = np.zeros(d)
    shift = np.asarray(shift, dtype=float)
    if shift.shape != (d,):
        raise ValueError(f"shift must have shape ({d},)")
    return GaussianClassGenerator(means, variances, shift)


def augment_real(sample: Sample, sigma: float, rng: np.random.Generator) -> Sample:
    if sample.origin != Origin.REAL:
        raise ValueError("augmentation applies to real samples only")
    if sigma == 0:
        return sample
    noise = rng.normal(0.0, sigma, size=sample.features.shape)
    return Sample(sample.features + noise, sample.label, sample.origin)


def augment_features(features: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Batch form of `augment_real` over a (n, d) block of real rows."""
    if sigma == 0 or len(features) == 0:
        return features
    return features + rng.normal(0.0, sigma, size=features.shape)


def save_csv(dataset: LabeledDataset, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"feature_{i}" for i in range(dataset.dim)] + ["label", "origin"])
        for x, y, o in zip(dataset.features, dataset.labels, dataset.origin):
            w.writerow([repr(float(v)) for v in x] + [int(y), Origin(int(o)).name.lower()])


def load_csv(path: str | Path, num_classes: int | None = None) -> LabeledDataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path} is empty")
    header, body = rows[0], rows[1:]
    if header[-2:] != ["label", "origin"] or not all(h.startswith("feature_") for h in header[:-2]):
        raise ValueError(f"{path}: expected header feature_0..feature_{{d-1}},label,origin")
    d = len(header) - 2
    x = np.array([[float(v) for v in r[:d]] for r in body]).reshape(len(body), d)
    y = np.array([int(r[d]) for r in body], dtype=np.int64)
    origin = np.array([Origin[r[d + 1].upper()] for r in body], dtype=np.int8)
    c = num_classes if num_classes is not None else (int(y.max()) + 1 if len(y) else 0)
    return LabeledDataset(x, y, c, origin)
