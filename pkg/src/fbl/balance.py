"""Client-side rebalancing: balance point, class split, loss-based sampling,
periodic replay of the sampled subset and synthetic filling."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import numpy as np

from .config import FederationConfig
from .data import ClassGenerator, LabeledDataset, class_counts
from .model import Classifier, per_sample_losses, predict_logits
from .rng import derive_rng

log = logging.getLogger(__name__)


class ComputeMode(enum.Enum):
    CONSTRAINED = "constrained"
    UNCONSTRAINED = "unconstrained"
    INCAPABLE = "incapable"


@dataclass(frozen=True)
class BalancePoint:
    value: int
    mode: ComputeMode
    clamped: bool = False


@dataclass(frozen=True)
class ClassPartition:
    excessive: frozenset[int]
    scarce: frozenset[int]
    missing: frozenset[int]

    @property
    def special(self) -> frozenset[int]:
        return self.scarce | self.missing


def compute_balance_point(counts: np.ndarray, mode: ComputeMode = ComputeMode.CONSTRAINED) -> BalancePoint:
    """Constrained: floor of the mean class count (at least 1). Unconstrained: the max count."""
    counts = np.asarray(counts, dtype=np.int64)
    if counts.ndim != 1 or counts.size == 0:
        raise ValueError("counts must be a nonempty vector")
    if counts.min() < 0:
        raise ValueError("counts must be nonnegative")
    if counts.sum() == 0:
        raise ValueError("client holds no samples")
    if mode is ComputeMode.UNCONSTRAINED:
        return BalancePoint(int(counts.max()), mode)
    if mode is not ComputeMode.CONSTRAINED:
        raise ValueError(f"no balance point for mode {mode}")
    b = int(counts.sum()) // counts.size
    if b < 1:
        return BalancePoint(1, mode, clamped=True)
    return BalancePoint(b, mode)


def classify_classes(counts: np.ndarray, balance: int) -> ClassPartition:
    if balance < 1:
        raise ValueError("balance point must be >= 1")
    excessive, scarce, missing = set(), set(), set()
    for c, n in enumerate(np.asarray(counts).tolist()):
        if n > balance:
            excessive.add(c)
        elif n > 0:
            scarce.add(c)
        else:
            missing.add(c)
    return ClassPartition(frozenset(excessive), frozenset(scarce), frozenset(missing))


def knowledge_sample(losses: np.ndarray, budget: int) -> np.ndarray:
    """Indices of the `budget` largest losses (ties to the lower index), ascending."""
    losses = np.asarray(losses, dtype=float)
    if not np.all(np.isfinite(losses)):
        raise ValueError("losses must be finite")
    k = max(0, min(budget, losses.size))
    return np.sort(np.argsort(-losses, kind="stable")[:k])


def random_sample(pool_size: int, budget: int, rng: np.random.Generator) -> np.ndarray:
    k = max(0, min(budget, pool_size))
    return np.sort(rng.choice(pool_size, size=k, replace=False))


def _retained_count(gamma: float, budget: int) -> int:
    # guard against products like 0.29 * 100 = 28.999999999999996
    return int(np.floor(gamma * budget + 1e-9))


def knowledge_replay(
    active: np.ndarray,
    pool_size: int,
    gamma: float,
    budget: int,
    rng: np.random.Generator,
    losses: np.ndarray | None = None,
) -> np.ndarray:
    """Next active subset: floor(gamma*budget) uniform picks from the current
    subset plus the highest-loss samples from the rest of the pool.

    Without `losses` the new portion is drawn uniformly (random-sampling
    ablation). If the rest of the pool is too small the shortfall is taken
    from the unretained part of the current subset.
    """
    if not 0 <= gamma <= 1:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    active = np.asarray(active, dtype=np.int64)
    if active.size and (active.min() < 0 or active.max() >= pool_size):
        raise ValueError("active indices outside the pool")
    target = min(budget, pool_size)
    q_old = min(_retained_count(gamma, budget), active.size, target)
    retained = np.sort(rng.choice(active, size=q_old, replace=False)) if q_old else active[:0]
    q_new = target - q_old

    complement = np.setdiff1d(np.arange(pool_size), active)
    take = min(q_new, complement.size)
    if losses is None:
        fresh = rng.choice(complement, size=take, replace=False) if take else complement[:0]
    else:
        losses = np.asarray(losses, dtype=float)
        fresh = complement[knowledge_sample(losses[complement], take)]

    short = q_new - take
    if short:
        leftover = np.setdiff1d(active, retained)
        if losses is None:
            extra = rng.choice(leftover, size=short, replace=False)
        else:
            extra = leftover[knowledge_sample(losses[leftover], short)]
        fresh = np.concatenate([fresh, extra])
    return np.sort(np.concatenate([retained, fresh]))


def knowledge_fill(generator: ClassGenerator, label: int, deficit: int, rng: np.random.Generator) -> LabeledDataset:
    if deficit < 0:
        raise ValueError("deficit must be nonnegative")
    return generator.generate(label, deficit, rng)


@dataclass
class ReplayState:
    """Active subset per excessive class, as positions within that class's local pool."""

    period: int
    gamma: float
    active: dict[int, np.ndarray] = field(default_factory=dict)
    cycle: int | None = None


@dataclass
class ClientState:
    client_id: int
    data: LabeledDataset
    mode: ComputeMode
    generator: ClassGenerator | None = None
    balance: BalancePoint | None = None
    partition: ClassPartition | None = None
    replay: ReplayState | None = None
    table: object | None = None  # AlignmentTable, client-private
    synthetic: LabeledDataset | None = None
    last_model: Classifier | None = None

    @property
    def capable(self) -> bool:
        return self.mode is not ComputeMode.INCAPABLE

    def class_pool(self, c: int) -> np.ndarray:
        return self.data.class_indices(c)


def prepare_client(client: ClientState, config: FederationConfig) -> ClientState:
    """Balance point, class split and the cached synthetic fill for a generation-capable client."""
    if not client.capable:
        return client
    counts = class_counts(client.data)
    mode = ComputeMode.UNCONSTRAINED if client.mode is ComputeMode.UNCONSTRAINED else ComputeMode.CONSTRAINED
    client.balance = compute_balance_point(counts, mode)
    if client.balance.clamped:
        log.warning("client %d: balance point clamped to 1 (counts %s)", client.client_id, counts.tolist())
    client.partition = classify_classes(counts, client.balance.value)
    client.replay = ReplayState(config.replay_period, config.gamma)
    client.synthetic = _fill(client, counts, derive_rng(config.seed, client.client_id, 0, "fill"))
    return client


def _fill(client: ClientState, counts: np.ndarray, rng: np.random.Generator) -> LabeledDataset:
    if client.generator is None:
        raise ValueError(f"client {client.client_id} has no generator")
    b = client.balance.value
    parts = [
        knowledge_fill(client.generator, c, b - int(counts[c]), rng)
        for c in sorted(client.partition.special)
    ]
    parts = [p for p in parts if len(p)]
    if not parts:
        return LabeledDataset.empty(client.data.dim, client.data.num_classes)
    return LabeledDataset.concat(parts)


def rebalance_client(
    client: ClientState,
    model: Classifier,
    round_idx: int,
    config: FederationConfig,
) -> LabeledDataset:
    """Working set for this round: sampled excessive classes, all scarce real
    samples, and the cached synthetic fill.

    The excessive-class selection is refreshed on the client's first
    participation and whenever a new replay cycle (round // period) has
    begun; otherwise the previous selection is reused.
    """
    if len(client.data) == 0:
        raise ValueError(f"client {client.client_id} has no local data")
    if client.balance is None:
        prepare_client(client, config)
    replay = client.replay
    b = client.balance.value
    cycle = round_idx // replay.period
    first = replay.cycle is None
    refresh = first or config.rerank_every_round or cycle > replay.cycle

    if refresh and client.partition.excessive:
        rng = derive_rng(config.seed, client.client_id, round_idx, "replay")
        by_loss = config.sampling == "loss"
        pools = {c: client.class_pool(c) for c in sorted(client.partition.excessive)}
        losses = {}
        if by_loss:
            rows = np.concatenate(list(pools.values()))
            logits = predict_logits(model, client.data.features[rows])
            flat = per_sample_losses(logits, client.data.labels[rows])
            offset = 0
            for c, pool in pools.items():
                losses[c] = flat[offset : offset + pool.size]
                offset += pool.size
        for c, pool in pools.items():
            if first:
                if by_loss:
                    replay.active[c] = knowledge_sample(losses[c], b)
                else:
                    replay.active[c] = random_sample(pool.size, b, rng)
            else:
                replay.active[c] = knowledge_replay(
                    replay.active[c], pool.size, replay.gamma, b, rng, losses.get(c)
                )
    if refresh:
        if config.regenerate_fill_every_m and not first and cycle > replay.cycle:
            rng = derive_rng(config.seed, client.client_id, round_idx, "fill")
            client.synthetic = _fill(client, class_counts(client.data), rng)
        replay.cycle = cycle

    parts = [client.class_pool(c)[replay.active[c]] for c in sorted(client.partition.excessive)]
    parts += [client.class_pool(c) for c in sorted(client.partition.scarce)]
    real_rows = np.sort(np.concatenate(parts)) if parts else np.zeros(0, dtype=np.int64)
    real = client.data.subset(real_rows)
    if client.synthetic is None or len(client.synthetic) == 0:
        return real
    return LabeledDataset.concat([real, client.synthetic])
