"""Server/client simulation: client modes and selection, local training,
aggregation, evaluation and the round loop."""

from __future__ import annotations

import csv
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .alignment import AlignmentTable, alignment_gap, train_batch_aligned
from .balance import ClientState, ComputeMode, prepare_client, rebalance_client
from .config import FederationConfig
from .data import (
    LabeledDataset,
    augment_features,
    default_domain_shift,
    dirichlet_partition,
    fit_gaussian_generator,
    mean_intra_class_std,
)
from .model import Classifier, GradientBuffer, backward, init_classifier, predict_logits, sgd_step
from .rng import SERVER, derive_rng

log = logging.getLogger(__name__)


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5 + 1e-9))


@dataclass
class RoundMetrics:
    round: int
    accuracy: float
    mean_loss: float
    working_set_sizes: dict[int, int]
    seconds: float
    alignment_gap: float | None = None


def assign_compute_modes(
    num_clients: int,
    unconstrained_fraction: float,
    incapable_fraction: float,
    rng: np.random.Generator,
) -> list[ComputeMode]:
    if not (0 <= unconstrained_fraction <= 1 and 0 <= incapable_fraction <= 1):
        raise ValueError("fractions must lie in [0, 1]")
    if unconstrained_fraction + incapable_fraction > 1:
        raise ValueError("unconstrained and incapable fractions exceed 1")
    n_free = _round_half_up(unconstrained_fraction * num_clients)
    n_none = _round_half_up(incapable_fraction * num_clients)
    if n_free + n_none > num_clients:
        raise ValueError("rounded mode counts exceed the number of clients")
    modes = [ComputeMode.CONSTRAINED] * num_clients
    order = rng.permutation(num_clients)
    for k in order[:n_free]:
        modes[k] = ComputeMode.UNCONSTRAINED
    for k in order[n_free : n_free + n_none]:
        modes[k] = ComputeMode.INCAPABLE
    return modes


def select_clients(num_clients: int, fraction: float, rng: np.random.Generator) -> np.ndarray:
    if not 0 < fraction <= 1:
        raise ValueError("selection fraction must lie in (0, 1]")
    m = max(1, _round_half_up(fraction * num_clients))
    return np.sort(rng.choice(num_clients, size=m, replace=False))


def iterate_batches(
    n: int,
    batch_size: int,
    rng: np.random.Generator,
    steps: int | None = None,
    epochs: int | None = None,
) -> Iterator[np.ndarray]:
    """Index batches over reshuffled passes; the last batch of a pass may be short."""
    if n == 0:
        return
    done = 0
    passes = 0
    while True:
        if epochs is not None and passes >= epochs:
            return
        perm = rng.permutation(n)
        passes += 1
        for start in range(0, n, batch_size):
            if steps is not None and done >= steps:
                return
            yield perm[start : start + batch_size]
            done += 1


def add_proximal(buffer: GradientBuffer, model: Classifier, anchor: Classifier, mu: float) -> None:
    for g, w, w0 in zip(buffer.grads, model.parameters(), anchor.parameters()):
        g += mu * (w - w0)


def train_batch(
    model: Classifier,
    batch: LabeledDataset,
    config: FederationConfig,
    aug_rng: np.random.Generator,
    buffer: GradientBuffer,
    augment_sigma: float = 0.0,
    anchor: Classifier | None = None,
) -> float:
    """Plain (FedAvg / FedProx) step on real data."""
    x = augment_features(batch.features, augment_sigma, aug_rng)
    res = backward(model, x, batch.labels, None, buffer)
    if anchor is not None and config.method == "fedprox":
        add_proximal(buffer, model, anchor, config.prox_mu)
    sgd_step(model, buffer, config.lr, config.momentum, config.weight_decay)
    return res.loss


def local_train(
    client: ClientState,
    global_model: Classifier,
    config: FederationConfig,
    round_idx: int,
    working: LabeledDataset | None = None,
    augment_sigma: float = 0.0,
) -> tuple[Classifier, float]:
    """Train a copy of the global model on the client's working set (raw data if none given)."""
    data = client.data if working is None else working
    if len(data) == 0:
        raise ValueError(f"client {client.client_id}: empty working set")
    model = global_model.copy()
    buffer = GradientBuffer.zeros_like(model)
    k = client.client_id
    shuffle_rng = derive_rng(config.seed, k, round_idx, "shuffle")
    aug_rng = derive_rng(config.seed, k, round_idx, "augment")
    aligned = config.method == "fbl" and client.capable
    if aligned:
        drop_rng = derive_rng(config.seed, k, round_idx, "drop")
        if client.table is not None and not config.persist_embeddings:
            client.table.reset()

    if config.local_epochs is not None:
        batches = iterate_batches(len(data), config.batch_size, shuffle_rng, epochs=config.local_epochs)
    else:
        batches = iterate_batches(len(data), config.batch_size, shuffle_rng, steps=config.local_iters)

    losses = []
    for idx in batches:
        batch = data.subset(idx)
        if aligned:
            loss = train_batch_aligned(model, client.table, batch, config, aug_rng, drop_rng, buffer, augment_sigma)
        else:
            loss = train_batch(model, batch, config, aug_rng, buffer, augment_sigma, anchor=global_model)
        losses.append(loss)
    return model, float(np.mean(losses)) if losses else float("nan")


def aggregate(models: list[Classifier], weights: list[float] | None = None) -> Classifier:
    """Elementwise (weighted) mean of congruent models, summed in list order."""
    if not models:
        raise ValueError("nothing to aggregate")
    if weights is None:
        w = np.full(len(models), 1.0 / len(models))
    else:
        w = np.asarray(weights, dtype=float)
        if w.shape != (len(models),) or w.sum() <= 0:
            raise ValueError("bad aggregation weights")
        w = w / w.sum()
    out = models[0].copy()
    shapes = [p.shape for p in out.parameters()]
    for m in models[1:]:
        if [p.shape for p in m.parameters()] != shapes:
            raise ValueError("models are not shape-congruent")
    for j, target in enumerate(out.parameters()):
        if weights is None:
            acc = np.zeros_like(target)
            for m in models:
                acc += m.parameters()[j]
            target[...] = acc / len(models)
        else:
            acc = np.zeros_like(target)
            for wi, m in zip(w, models):
                acc += wi * m.parameters()[j]
            target[...] = acc
    return out


def evaluate(model: Classifier, test: LabeledDataset) -> float:
    if len(test) == 0:
        raise ValueError("empty test set")
    pred = np.argmax(predict_logits(model, test.features), axis=1)
    return float(np.mean(pred == test.labels))


@dataclass
class FederationRun:
    config: FederationConfig
    metrics: list[RoundMetrics]
    initial_model: Classifier
    model: Classifier
    clients: list[ClientState] = field(default_factory=list)

    @property
    def final_accuracy(self) -> float:
        return self.metrics[-1].accuracy if self.metrics else float("nan")


def build_clients(
    config: FederationConfig,
    train: LabeledDataset,
) -> list[ClientState]:
    parts = dirichlet_partition(train, config.num_clients, config.alpha, derive_rng(config.seed, SERVER, 0, "partition"))
    if config.method == "fbl":
        modes = assign_compute_modes(
            config.num_clients,
            config.unconstrained_fraction,
            config.incapable_fraction,
            derive_rng(config.seed, SERVER, 0, "modes"),
        )
        shift = default_domain_shift(train, config.domain_shift_scale)
        generator = fit_gaussian_generator(train, shift)
    else:
        modes = [ComputeMode.INCAPABLE] * config.num_clients
        generator = None

    clients = []
    for k, (data, mode) in enumerate(zip(parts, modes)):
        client = ClientState(k, data, mode, generator=generator if mode is not ComputeMode.INCAPABLE else None)
        if client.capable and len(data):
            prepare_client(client, config)
            client.table = AlignmentTable.zeros(client.partition.special, config.feature_dim)
        clients.append(client)
    return clients


def run_federation(
    config: FederationConfig,
    train: LabeledDataset,
    test: LabeledDataset,
    workers: int = 1,
) -> FederationRun:
    """Simulate the full protocol. Results depend only on (config, data), not on `workers`."""
    model0 = init_classifier(train.dim, config.hidden_dims, train.num_classes, derive_rng(config.seed, SERVER, 0, "init"))
    clients = build_clients(config, train)
    for c in clients:
        c.last_model = model0
    sigma = config.augment_sigma if config.augment_sigma is not None else 0.1 * mean_intra_class_std(train)
    global_model = model0.copy()
    metrics: list[RoundMetrics] = []

    def work(k: int, round_idx: int, gm: Classifier) -> tuple[Classifier, float, int]:
        client = clients[k]
        working = rebalance_client(client, gm, round_idx, config) if config.method == "fbl" and client.capable else client.data
        local, loss = local_train(client, gm, config, round_idx, working, sigma)
        return local, loss, len(working)

    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for t in range(1, config.rounds + 1):
            start = time.perf_counter()
            selected = select_clients(config.num_clients, config.selection_fraction, derive_rng(config.seed, SERVER, t, "select"))
            active = [int(k) for k in selected if len(clients[k].data)]
            if len(active) < len(selected):
                log.info("round %d: skipping %d empty clients", t, len(selected) - len(active))
            if pool is not None:
                results = list(pool.map(lambda k: work(k, t, global_model), active))
            else:
                results = [work(k, t, global_model) for k in active]

            if results:
                for k, (local, _, _) in zip(active, results):
                    clients[k].last_model = local
                if config.aggregate_all_clients:
                    global_model = aggregate([c.last_model for c in clients])
                elif config.weight_by_samples:
                    global_model = aggregate([r[0] for r in results], [r[2] for r in results])
                else:
                    global_model = aggregate([r[0] for r in results])

            gap = None
            if config.track_alignment_gap and config.method == "fbl":
                gaps = [
                    alignment_gap(global_model, c.table, c.synthetic, train)
                    for c in clients
                    if c.capable and c.table is not None and c.synthetic is not None and len(c.synthetic)
                ]
                gaps = [g for g in gaps if g is not None]
                gap = float(np.mean(gaps)) if gaps else None
            metrics.append(
                RoundMetrics(
                    round=t,
                    accuracy=evaluate(global_model, test),
                    mean_loss=float(np.mean([r[1] for r in results])) if results else float("nan"),
                    working_set_sizes={k: r[2] for k, r in zip(active, results)},
                    seconds=time.perf_counter() - start,
                    alignment_gap=gap,
                )
            )
            log.debug("round %d acc %.4f", t, metrics[-1].accuracy)
    finally:
        if pool is not None:
            pool.shutdown()
    return FederationRun(config, metrics, model0, global_model, clients)


def write_metrics_csv(metrics: list[RoundMetrics], path: str | Path, timing: bool = True) -> None:
    """Per-round CSV. With `timing=False` the seconds column is left blank so
    repeated runs produce byte-identical files."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["round", "accuracy", "mean_loss", "seconds"])
        for m in metrics:
            w.writerow([m.round, repr(m.accuracy), repr(m.mean_loss), repr(m.seconds) if timing else ""])


def run_summary(run: FederationRun) -> dict:
    accs = [m.accuracy for m in run.metrics]
    summary = {
        "config": run.config.to_dict(),
        "final_accuracy": accs[-1] if accs else None,
        "best_accuracy": max(accs) if accs else None,
        "rounds_completed": len(accs),
    }
    if any(m.alignment_gap is not None for m in run.metrics):
        summary["alignment_gap"] = [m.alignment_gap for m in run.metrics]
    tables = {str(c.client_id): c.table.to_dict() for c in run.clients if c.table is not None and len(c.table)}
    if tables:
        summary["alignment_tables"] = tables
    return summary


def write_summary_json(run: FederationRun, path: str | Path, extra: dict | None = None) -> None:
    summary = run_summary(run)
    if extra:
        summary.update(extra)
    Path(path).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
