"""Per-class alignment embeddings for synthetic samples and the drop regularizer.

A synthetic sample of class i is classified as H(F(x) + P_i); a dropped
synthetic sample, and every real sample, as H(F(x)).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import FederationConfig
from .data import LabeledDataset, Origin, Sample, augment_features
from .model import Classifier, GradientBuffer, backward, forward_features, forward_head, sgd_step


@dataclass
class AlignmentTable:
    feature_dim: int
    embeddings: dict[int, np.ndarray] = field(default_factory=dict)
    velocity: dict[int, np.ndarray] = field(default_factory=dict)

    @classmethod
    def zeros(cls, classes, feature_dim: int) -> AlignmentTable:
        classes = sorted(classes)
        return cls(
            feature_dim,
            {c: np.zeros(feature_dim) for c in classes},
            {c: np.zeros(feature_dim) for c in classes},
        )

    def __contains__(self, label: int) -> bool:
        return label in self.embeddings

    def __len__(self) -> int:
        return len(self.embeddings)

    def reset(self) -> None:
        for c in self.embeddings:
            self.embeddings[c] = np.zeros(self.feature_dim)
            self.velocity[c] = np.zeros(self.feature_dim)

    def step(self, label: int, grad: np.ndarray, lr: float, momentum: float, weight_decay: float) -> None:
        # same update rule as the classifier parameters
        p, v = self.embeddings[label], self.velocity[label]
        v *= momentum
        v += grad
        v += weight_decay * p
        p -= lr * v
        if not np.all(np.isfinite(p)):
            raise FloatingPointError(f"non-finite embedding for class {label}")

    def to_dict(self) -> dict[str, list[float]]:
        return {str(c): [float(v) for v in p] for c, p in sorted(self.embeddings.items())}


def forward_aligned(model: Classifier, table: AlignmentTable, sample: Sample, dropped: bool = False) -> np.ndarray:
    feat = forward_features(model, sample.features)
    if sample.origin == Origin.SYNTHETIC and not dropped:
        if sample.label not in table:
            raise KeyError(f"no alignment embedding for class {sample.label}")
        feat = feat + table.embeddings[sample.label]
    return forward_head(model, feat)


def make_drop_mask(batch: LabeledDataset, drop_count: int, rng: np.random.Generator) -> np.ndarray:
    """True for the synthetic samples whose embedding is skipped in this batch."""
    if drop_count < 0:
        raise ValueError("drop_count must be nonnegative")
    mask = np.zeros(len(batch), dtype=bool)
    synthetic = np.flatnonzero(batch.origin == Origin.SYNTHETIC)
    k = min(drop_count, synthetic.size)
    if k:
        mask[rng.choice(synthetic, size=k, replace=False)] = True
    return mask


def embedding_rows(table: AlignmentTable, batch: LabeledDataset, dropped: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample offsets and the mask of rows that actually carry an embedding."""
    carries = (batch.origin == Origin.SYNTHETIC) & ~dropped
    offsets = np.zeros((len(batch), table.feature_dim))
    for i in np.flatnonzero(carries):
        label = int(batch.labels[i])
        if label not in table:
            raise KeyError(f"no alignment embedding for class {label}")
        offsets[i] = table.embeddings[label]
    return offsets, carries


def train_batch_aligned(
    model: Classifier,
    table: AlignmentTable | None,
    batch: LabeledDataset,
    config: FederationConfig,
    aug_rng: np.random.Generator,
    drop_rng: np.random.Generator,
    buffer: GradientBuffer,
    augment_sigma: float = 0.0,
) -> float:
    """One SGD step on `batch`, updating the classifier and the embeddings in place.

    Only embeddings that received gradient from at least one non-dropped
    synthetic sample are stepped. Returns the batch loss.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    x = batch.features.copy()
    real = batch.origin == Origin.REAL
    x[real] = augment_features(x[real], augment_sigma, aug_rng)

    offsets = carries = None
    if config.use_alignment and table is not None and len(table):
        drop = config.drop_count if config.use_drop else 0
        dropped = make_drop_mask(batch, drop, drop_rng)
        offsets, carries = embedding_rows(table, batch, dropped)
        if not carries.any():
            offsets = None

    res = backward(model, x, batch.labels, offsets, buffer)
    sgd_step(model, buffer, config.lr, config.momentum, config.weight_decay)

    if offsets is not None:
        labels = batch.labels[carries]
        grads = res.offset_grads[carries]
        for c in np.unique(labels):
            table.step(int(c), grads[labels == c].sum(axis=0), config.lr, config.momentum, config.weight_decay)
    return res.loss


def alignment_gap(model: Classifier, table: AlignmentTable, synthetic: LabeledDataset, real: LabeledDataset) -> float | None:
    """Mean over embedded classes of |centroid(F(x_syn) + P_i) - centroid(F(x_real))|."""
    dists = []
    for c in sorted(table.embeddings):
        syn = synthetic.features[synthetic.labels == c]
        ref = real.features[real.labels == c]
        if len(syn) == 0 or len(ref) == 0:
            continue
        syn_centroid = forward_features(model, syn).mean(axis=0) + table.embeddings[c]
        real_centroid = forward_features(model, ref).mean(axis=0)
        dists.append(float(np.linalg.norm(syn_centroid - real_centroid)))
    return float(np.mean(dists)) if dists else None
