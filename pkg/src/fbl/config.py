from __future__ import annotations

from dataclasses import asdict, dataclass, fields

METHODS = ("fbl", "fedavg", "fedprox")
SAMPLING = ("loss", "random")


@dataclass
class FederationConfig:
    """Protocol hyperparameters. Defaults follow the reference experimental setup."""

    num_clients: int = 20
    rounds: int = 200
    local_iters: int = 10
    # when set, train this many full passes over the working set instead of `local_iters` steps
    local_epochs: int | None = None
    selection_fraction: float = 0.5
    lr: float = 1e-3
    momentum: float = 1e-4
    weight_decay: float = 1e-5
    batch_size: int = 64
    drop_count: int = 2
    replay_period: int = 50
    gamma: float = 0.1
    alpha: float = 0.1
    unconstrained_fraction: float = 0.0
    incapable_fraction: float = 0.0
    method: str = "fbl"
    prox_mu: float = 0.01
    seed: int = 0

    # ablation switches
    use_alignment: bool = True
    use_drop: bool = True
    sampling: str = "loss"

    # variants of underspecified protocol details
    rerank_every_round: bool = False
    regenerate_fill_every_m: bool = False
    persist_embeddings: bool = True
    weight_by_samples: bool = False
    aggregate_all_clients: bool = False

    # model and data plumbing
    hidden_dims: tuple[int, ...] = (32, 16)
    augment_sigma: float | None = None  # None: 0.1 x mean intra-class std of the training set
    domain_shift_scale: float = 0.75  # in units of mean intra-class std
    track_alignment_gap: bool = False

    def __post_init__(self) -> None:
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)
        self.validate()

    def validate(self) -> None:
        def need(ok: bool, msg: str) -> None:
            if not ok:
                raise ValueError(msg)

        need(self.num_clients >= 1, "num_clients must be >= 1")
        need(self.rounds >= 0, "rounds must be >= 0")
        need(self.local_iters >= 0, "local_iters must be >= 0")
        need(self.local_epochs is None or self.local_epochs >= 0, "local_epochs must be >= 0")
        need(0 < self.selection_fraction <= 1, "selection_fraction must lie in (0, 1]")
        need(self.lr > 0, "lr must be > 0")
        need(self.momentum >= 0, "momentum must be >= 0")
        need(self.weight_decay >= 0, "weight_decay must be >= 0")
        need(self.batch_size >= 1, "batch_size must be >= 1")
        need(self.drop_count >= 0, "drop_count must be >= 0")
        need(self.replay_period >= 1, "replay_period must be >= 1")
        need(0 <= self.gamma <= 1, "gamma must lie in [0, 1]")
        need(self.alpha > 0, "alpha must be > 0")
        need(0 <= self.unconstrained_fraction <= 1, "unconstrained_fraction must lie in [0, 1]")
        need(0 <= self.incapable_fraction < 1, "incapable_fraction must lie in [0, 1)")
        need(
            self.unconstrained_fraction + self.incapable_fraction <= 1,
            "unconstrained_fraction + incapable_fraction must be <= 1",
        )
        need(self.method in METHODS, f"method must be one of {METHODS}")
        need(self.prox_mu >= 0, "prox_mu must be >= 0")
        need(self.sampling in SAMPLING, f"sampling must be one of {SAMPLING}")
        need(len(self.hidden_dims) >= 1 and min(self.hidden_dims) >= 1, "hidden_dims must be positive")
        need(self.augment_sigma is None or self.augment_sigma >= 0, "augment_sigma must be >= 0")

    @property
    def feature_dim(self) -> int:
        return self.hidden_dims[-1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        return d

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]
