"""Small MLP classifier split into a feature extractor and a linear head.

The extractor is a stack of dense layers, each followed by its own
activation (tanh in the reference network, so features lie in (-1, 1)).
The head is a single linear layer. Gradients are derived by hand and support
an optional per-sample offset added to the features before the head.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    pass


ACTIVATIONS = ("tanh", "linear")


@dataclass
class Dense:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "linear"

    def __post_init__(self) -> None:
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        z = x @ self.weight.T + self.bias
        return np.tanh(z) if self.activation == "tanh" else z


@dataclass
class Classifier:
    feature_layers: list[Dense]
    head: Dense

    def __post_init__(self) -> None:
        if not self.feature_layers:
            raise ShapeError("classifier needs at least one feature layer")
        for prev, nxt in zip(self.feature_layers, self.feature_layers[1:] + [self.head]):
            if prev.out_dim != nxt.in_dim:
                raise ShapeError(f"layer output {prev.out_dim} does not feed input {nxt.in_dim}")
        if self.head.activation != "linear":
            raise ValueError("the head must be linear")
        for layer in self.feature_layers + [self.head]:
            if layer.bias.shape != (layer.out_dim,):
                raise ShapeError(f"bias shape {layer.bias.shape} != ({layer.out_dim},)")

    @property
    def input_dim(self) -> int:
        return self.feature_layers[0].in_dim

    @property
    def feature_dim(self) -> int:
        return self.head.in_dim

    @property
    def num_classes(self) -> int:
        return self.head.out_dim

    def parameters(self) -> list[np.ndarray]:
        """Parameter arrays in a fixed order; these are the live arrays, not copies."""
        out: list[np.ndarray] = []
        for layer in self.feature_layers + [self.head]:
            out.extend((layer.weight, layer.bias))
        return out

    def copy(self) -> Classifier:
        return copy.deepcopy(self)

    def check_finite(self) -> None:
        for p in self.parameters():
            if not np.all(np.isfinite(p)):
                raise FloatingPointError("non-finite classifier parameter")


def init_classifier(
    input_dim: int,
    hidden_dims: tuple[int, ...] | list[int],
    num_classes: int,
    rng: np.random.Generator,
) -> Classifier:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init. The last hidden dim is the feature dim."""
    dims = [input_dim, *hidden_dims]
    if len(dims) < 2 or min(dims) < 1 or num_classes < 1:
        raise ShapeError(f"bad layer dims {dims} -> {num_classes}")

    def dense(fan_in: int, fan_out: int, activation: str) -> Dense:
        s = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-s, s, size=(fan_out, fan_in))
        b = rng.uniform(-s, s, size=fan_out)
        return Dense(w, b, activation)

    layers = [dense(a, b, "tanh") for a, b in zip(dims[:-1], dims[1:])]
    return Classifier(layers, dense(dims[-1], num_classes, "linear"))


def _as_batch(x: np.ndarray, dim: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    batch = x[None, :] if single else x
    if batch.ndim != 2 or batch.shape[1] != dim:
        raise ShapeError(f"expected input of width {dim}, got shape {x.shape}")
    return batch, single


def _feature_pass(model: Classifier, x: np.ndarray) -> list[np.ndarray]:
    """Activations [x, a_1, ..., a_L]; the last entry is the feature vector."""
    acts = [x]
    for layer in model.feature_layers:
        acts.append(layer(acts[-1]))
    return acts


def forward_features(model: Classifier, x: np.ndarray) -> np.ndarray:
    batch, single = _as_batch(x, model.input_dim)
    if not np.all(np.isfinite(batch)):
        raise ValueError("input contains non-finite values")
    feat = _feature_pass(model, batch)[-1]
    return feat[0] if single else feat


def forward_head(model: Classifier, feat: np.ndarray) -> np.ndarray:
    batch, single = _as_batch(feat, model.feature_dim)
    logits = model.head(batch)
    return logits[0] if single else logits


def predict_logits(model: Classifier, x: np.ndarray) -> np.ndarray:
    return forward_head(model, forward_features(model, x))


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def cross_entropy(logits: np.ndarray, label: int) -> float:
    logits = np.asarray(logits, dtype=float)
    if not 0 <= label < logits.shape[-1]:
        raise ValueError(f"label {label} outside [0, {logits.shape[-1]})")
    return float(max(-log_softmax(logits)[label], 0.0))


def per_sample_losses(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels, dtype=int)
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError("label out of range")
    return np.maximum(-log_softmax(logits)[np.arange(len(labels)), labels], 0.0)


@dataclass
class GradientBuffer:
    """Per-parameter gradients plus the momentum accumulator, in `Classifier.parameters()` order."""

    grads: list[np.ndarray]
    velocity: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def zeros_like(cls, model: Classifier) -> GradientBuffer:
        params = model.parameters()
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


@dataclass
class BackwardResult:
    buffer: GradientBuffer
    loss: float
    offset_grads: np.ndarray | None  # (n, feature_dim), gradient of the mean loss per offset row


def backward(
    model: Classifier,
    x: np.ndarray,
    labels: np.ndarray,
    offsets: np.ndarray | None = None,
    buffer: GradientBuffer | None = None,
) -> BackwardResult:
    """Gradient of the mean cross-entropy over the batch.

    `offsets`, if given, holds one feature-width row per sample that is added
    to the extracted features before the head. Gradients are written into
    `buffer.grads` (a fresh buffer is made when none is supplied); the
    momentum state is left alone.
    """
    x, _ = _as_batch(x, model.input_dim)
    labels = np.asarray(labels, dtype=int)
    n = x.shape[0]
    if n == 0:
        raise ValueError("backward on an empty batch")
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} != ({n},)")

    acts = _feature_pass(model, x)
    feat = acts[-1]
    if offsets is not None:
        offsets = np.asarray(offsets, dtype=float)
        if offsets.shape != feat.shape:
            raise ShapeError(f"offsets shape {offsets.shape} != {feat.shape}")
        feat = feat + offsets
    logits = model.head(feat)
    logp = log_softmax(logits)
    loss = float(-np.mean(logp[np.arange(n), labels]))

    delta = np.exp(logp)
    delta[np.arange(n), labels] -= 1.0
    delta /= n

    grads: list[np.ndarray] = []
    grads_head = [delta.T @ feat, delta.sum(axis=0)]
    dfeat = delta @ model.head.weight

    d = dfeat  # gradient w.r.t. the output of the current layer
    layer_grads: list[list[np.ndarray]] = []
    for i in range(len(model.feature_layers) - 1, -1, -1):
        layer = model.feature_layers[i]
        if layer.activation == "tanh":
            d = d * (1.0 - acts[i + 1] ** 2)
        layer_grads.append([d.T @ acts[i], d.sum(axis=0)])
        if i > 0:
            d = d @ layer.weight
    for gw, gb in reversed(layer_grads):
        grads.extend((gw, gb))
    grads.extend(grads_head)

    if buffer is None:
        buffer = GradientBuffer.zeros_like(model)
    for slot, g in zip(buffer.grads, grads):
        slot[...] = g
    return BackwardResult(buffer, loss, dfeat.copy() if offsets is not None else None)


def sgd_step(
    model: Classifier,
    buffer: GradientBuffer,
    lr: float,
    momentum: float = 0.0,
    weight_decay: float = 0.0,
) -> Classifier:
    """In-place update: v <- momentum*v + g + wd*w; w <- w - lr*v."""
    params = model.parameters()
    if len(buffer.grads) != len(params):
        raise ShapeError("gradient buffer does not match classifier")
    if not buffer.velocity:
        buffer.velocity = [np.zeros_like(p) for p in params]
    for w, g, v in zip(params, buffer.grads, buffer.velocity):
        if g.shape != w.shape or v.shape != w.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {w.shape}")
        v *= momentum
        v += g
        v += weight_decay * w
        w -= lr * v
    model.check_finite()
    return model
